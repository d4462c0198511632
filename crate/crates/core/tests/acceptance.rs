//! Acceptance gate: prints one PASS/FAIL line per criterion and exits non-zero
//! if any failed. Runs without the libtest harness so the lines always show.
//!
//! The full run trains four checkpoints twice (once per worker count) and
//! takes a while on one core.

mod common;

use std::time::{Duration, Instant};

use common::checks::{
    conv_vs_oracle, metric_identities, miou_vs_oracle, patch_confusion_vs_oracle, sdc_boundaries, sdc_vs_oracle,
    Check, ORACLE_INSTANCES,
};
use common::gradcheck::{all_layers, FD_STEP};
use common::pipeline::{self, Settings};
use fseg::harness::{prepare_model, run_campaign, HardeningMode};
use fseg::{ActivationKind, InjectionPolicy};

const GRAD_INSTANCES: usize = 20;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const MIOU_BAND: f64 = 0.02;
const CRITICAL_FACTOR: f64 = 1.5;
const TREND_BUDGET: Duration = Duration::from_secs(30 * 60);
const CAMPAIGN_INJECTIONS: usize = 1000;

struct Line {
    id: &'static str,
    passed: bool,
}

fn line(id: &'static str, passed: bool, detail: String) -> Line {
    println!("criterion {id}: {} ({detail})", if passed { "PASS" } else { "FAIL" });
    Line { id, passed }
}

fn failed_checks(checks: &[Check]) -> Vec<String> {
    checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect()
}

fn gradients() -> Line {
    let start = Instant::now();
    let layers = all_layers(17, GRAD_INSTANCES);
    let elapsed = start.elapsed();
    let worst = layers.iter().map(|l| l.worst_rel_err).fold(0.0, f64::max);
    let passed = FD_STEP == 1e-6
        && layers.iter().all(|l| l.instances >= GRAD_INSTANCES && l.worst_rel_err < GRAD_TOL)
        && elapsed < GRAD_BUDGET;
    line(
        "1",
        passed,
        format!("{} layer types x {GRAD_INSTANCES}, worst rel err {worst:.2e} < {GRAD_TOL:e}, {elapsed:.2?}", layers.len()),
    )
}

fn oracles() -> Line {
    let start = Instant::now();
    let tallies = [
        ("conv", conv_vs_oracle(1, ORACLE_INSTANCES)),
        ("miou", miou_vs_oracle(2, ORACLE_INSTANCES)),
        ("classify_sdc", sdc_vs_oracle(3, ORACLE_INSTANCES)),
        ("patch_confusion", patch_confusion_vs_oracle(4, ORACLE_INSTANCES)),
    ];
    let elapsed = start.elapsed();
    let passed = tallies.iter().all(|(_, t)| t.passed() && t.instances >= 1000) && elapsed < ORACLE_BUDGET;
    let parts: Vec<String> = tallies.iter().map(|(n, t)| format!("{n} {}/{} mismatches", t.mismatches, t.instances)).collect();
    line("2", passed, format!("{}, {elapsed:.2?}", parts.join(", ")))
}

fn identities() -> Line {
    let checks = metric_identities(5);
    let failed = failed_checks(&checks);
    line("3", failed.is_empty(), format!("{}/{} identities hold {failed:?}", checks.len() - failed.len(), checks.len()))
}

fn boundaries() -> Line {
    let checks = sdc_boundaries();
    let failed = failed_checks(&checks);
    line("5", failed.is_empty(), format!("{}/{} boundary cases {failed:?}", checks.len() - failed.len(), checks.len()))
}

fn relumax_contract(out: &pipeline::Output) -> Vec<Line> {
    let model = prepare_model(out.models[&HardeningMode::ReluMax].clone(), HardeningMode::ReluMax, None).unwrap();
    let mut plain = model.clone();
    plain.set_activation_kind(ActivationKind::Relu);
    let mut differing = 0;
    for image in &out.train.images {
        let a = model.forward_eval(image, None).unwrap();
        let b = plain.forward_eval(image, None).unwrap();
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            differing += 1;
        }
    }
    let a = line(
        "4a",
        differing == 0,
        format!("{differing}/{} training images differ from plain ReLU", out.train.images.len()),
    );

    // The trend campaign already injects with the default extreme share; add
    // a run where every fault is Inf or NaN.
    let report = &out.reports[&HardeningMode::ReluMax];
    let extreme = InjectionPolicy {
        seed: 4,
        p_extreme: 1.0,
        ..InjectionPolicy::default()
    };
    let all_extreme = run_campaign(&model, out.val.as_labeled(), HardeningMode::ReluMax, &extreme, 10).unwrap();
    let total = report.aggregates.injections + all_extreme.aggregates.injections;
    let nonfinite = report.nonfinite_outputs + all_extreme.nonfinite_outputs;
    let b = line(
        "4b",
        nonfinite == 0 && report.aggregates.injections >= CAMPAIGN_INJECTIONS,
        format!("{nonfinite}/{total} injections produced non-finite logits"),
    );
    vec![a, b]
}

fn trends(out: &pipeline::Output) -> Vec<Line> {
    let none = &out.reports[&HardeningMode::None];
    let base = none.aggregates.fault_free_miou;
    let mut lines = Vec::new();

    let hardened = [HardeningMode::Relu6, HardeningMode::Relu6Fat, HardeningMode::Amms, HardeningMode::ReluMax];
    let gaps: Vec<String> = hardened
        .iter()
        .map(|m| format!("{m} {:+.4}", out.reports[m].aggregates.fault_free_miou - base))
        .collect();
    let within = hardened.iter().all(|m| (out.reports[m].aggregates.fault_free_miou - base).abs() <= MIOU_BAND);
    lines.push(line("6a", within, format!("fault-free mIoU none {base:.4}, gaps {}", gaps.join(", "))));

    let rm = &out.reports[&HardeningMode::ReluMax];
    let (c_none, c_rm) = (none.aggregates.critical_pct, rm.aggregates.critical_pct);
    lines.push(line(
        "6b",
        c_rm * CRITICAL_FACTOR < c_none,
        format!("critical % relumax {c_rm:.2} x {CRITICAL_FACTOR} vs none {c_none:.2}"),
    ));

    let (i_none, i_rm) = (none.aggregates.fault_injected_miou, rm.aggregates.fault_injected_miou);
    lines.push(line("6c", i_rm > i_none, format!("fault-injected mIoU relumax {i_rm:.4} vs none {i_none:.4}")));

    let (un, ur) = (&none.fault_injected_uncertainty, &rm.fault_injected_uncertainty);
    let ge = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a >= b);
    lines.push(line(
        "6d",
        ge(ur.pavpu, un.pavpu) && ge(ur.prr, un.prr),
        format!("PAvPU relumax {:?} vs none {:?}; PRR relumax {:?} vs none {:?}", ur.pavpu, un.pavpu, ur.prr, un.prr),
    ));

    let injections_ok = out.reports.values().all(|r| r.aggregates.injections >= CAMPAIGN_INJECTIONS);
    lines.push(line(
        "6 runtime",
        out.elapsed < TREND_BUDGET && injections_ok,
        format!("{:.1?} for 4 trainings and 5 campaigns of >= {CAMPAIGN_INJECTIONS} injections", out.elapsed),
    ));
    lines
}

fn determinism(first: &pipeline::Output) -> Line {
    let dir = tempfile::tempdir().unwrap();
    let second = pipeline::run(dir.path(), &Settings { threads: 4, ..Settings::default() });
    let differing: Vec<&String> = first
        .files
        .iter()
        .filter(|(name, bytes)| second.files.get(*name) != Some(*bytes))
        .map(|(name, _)| name)
        .collect();
    let same_set = first.files.len() == second.files.len();
    line(
        "7",
        differing.is_empty() && same_set,
        format!("{} files compared across 1 and 4 workers, differing {differing:?}", first.files.len()),
    )
}

fn main() {
    let mut lines = vec![gradients(), oracles(), identities()];

    let dir = tempfile::tempdir().unwrap();
    let out = pipeline::run(dir.path(), &Settings::default());
    lines.extend(relumax_contract(&out));
    lines.push(boundaries());
    lines.extend(trends(&out));
    lines.push(determinism(&out));

    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} checks passed", lines.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
