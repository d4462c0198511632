//! Randomized equivalence and boundary checks shared by the focused test
//! files and the acceptance gate.

use fseg::metrics::{classify_sdc, entropy_map, miou, patch_confusion, prr, PatchConfusion};
use fseg::nn::{conv2d_forward, Conv2d};
use fseg::rng::SimRng;
use fseg::{ClassMap, SdcClass, Shape, Tensor};

use super::oracles::{brute_classify_sdc, brute_miou, brute_patch_confusion, naive_conv};

pub const ORACLE_INSTANCES: usize = 1000;
pub const FLOAT_TOL: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct OracleTally {
    pub instances: usize,
    pub mismatches: usize,
    pub worst_abs_err: f64,
}

impl OracleTally {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

fn random_map(rng: &mut SimRng, h: usize, w: usize, classes: u64) -> ClassMap {
    // Sometimes restrict to fewer classes so absent-class handling is exercised.
    let used = rng.range_inclusive(1, classes as usize) as u64;
    ClassMap::new(h, w, (0..h * w).map(|_| rng.below(used) as u8).collect()).unwrap()
}

/// Library conv (f32 and f64) against the 7-loop oracle on 8×8 inputs.
pub fn conv_vs_oracle(seed: u64, instances: usize) -> OracleTally {
    let mut rng = SimRng::new(seed);
    let mut t = OracleTally {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let c = rng.range_inclusive(1, 3);
        let oc = rng.range_inclusive(1, 3);
        let k = [1, 3, 5][rng.below(3) as usize];
        let stride = rng.range_inclusive(1, 3);
        let x = Tensor::from_fn(Shape::new(rng.range_inclusive(1, 2), c, 8, 8), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let wt = Tensor::from_fn(Shape::new(oc, c, k, k), |_, _, _, _| rng.uniform(-1.0, 1.0));
        let bias: Vec<f64> = (0..oc).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let expected = naive_conv(&x, &wt, &bias, stride);

        let c64 = Conv2d::from_parts(wt.clone(), bias.clone(), stride).unwrap();
        let got64 = conv2d_forward(&x, &c64).unwrap();
        let c32 = Conv2d::from_parts(wt.cast::<f32>(), bias.iter().map(|&b| b as f32).collect(), stride).unwrap();
        let got32 = conv2d_forward(&x.cast::<f32>(), &c32).unwrap();
        // The f32 path sees inputs rounded to f32; compare it to the oracle on the same rounded values.
        let expected32 = naive_conv(&x.cast::<f32>().cast::<f64>(), &wt.cast::<f32>().cast::<f64>(), &bias.iter().map(|&b| b as f32 as f64).collect::<Vec<_>>(), stride);

        let mut err = 0.0f64;
        if got64.data().len() != expected.len() {
            t.mismatches += 1;
            continue;
        }
        for i in 0..expected.len() {
            err = err.max((got64.data()[i] - expected[i]).abs());
            err = err.max((got32.data()[i] as f64 - expected32[i]).abs());
        }
        t.worst_abs_err = t.worst_abs_err.max(err);
        if err > FLOAT_TOL {
            t.mismatches += 1;
        }
    }
    t
}

pub fn miou_vs_oracle(seed: u64, instances: usize) -> OracleTally {
    let mut rng = SimRng::new(seed);
    let mut t = OracleTally {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let gt = random_map(&mut rng, 8, 8, 3);
        let pred = random_map(&mut rng, 8, 8, 3);
        let err = (miou(&pred, &gt, 3).unwrap().miou - brute_miou(&pred, &gt, 3)).abs();
        t.worst_abs_err = t.worst_abs_err.max(err);
        if err > FLOAT_TOL {
            t.mismatches += 1;
        }
    }
    t
}

fn random_logits(rng: &mut SimRng, c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, c, h, w), |_, _, _, _| rng.uniform(-2.0, 2.0) as f32)
}

/// A faulty copy of `clean`: bit copy, uniform shift, or a handful of
/// perturbed pixels, chosen at random.
fn perturb(rng: &mut SimRng, clean: &Tensor<f32>) -> Tensor<f32> {
    let s = clean.shape();
    let mut f = clean.clone();
    match rng.below(4) {
        0 => {}
        1 => {
            let shift = rng.uniform(-1.0, 1.0) as f32;
            f = f.map(|v| v + shift);
        }
        _ => {
            for _ in 0..rng.range_inclusive(1, 5) {
                let (c, y, x) = (rng.below(s.c as u64) as usize, rng.below(s.h as u64) as usize, rng.below(s.w as u64) as usize);
                let v = f.get(0, c, y, x) + rng.uniform(-3.0, 3.0) as f32;
                f.set(0, c, y, x, v);
            }
        }
    }
    f
}

pub fn sdc_vs_oracle(seed: u64, instances: usize) -> OracleTally {
    let mut rng = SimRng::new(seed);
    let mut t = OracleTally {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let clean = random_logits(&mut rng, 3, 8, 8);
        let faulty = perturb(&mut rng, &clean);
        if classify_sdc(&clean, &faulty).unwrap().class != brute_classify_sdc(&clean, &faulty) {
            t.mismatches += 1;
        }
    }
    t
}

pub fn patch_confusion_vs_oracle(seed: u64, instances: usize) -> OracleTally {
    let mut rng = SimRng::new(seed);
    let mut t = OracleTally {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let gt = random_map(&mut rng, 8, 8, 3);
        let pred = random_map(&mut rng, 8, 8, 3);
        let logits = random_logits(&mut rng, 3, 8, 8);
        let entropy = entropy_map(&logits);
        let window = [1, 2, 4, 8][rng.below(4) as usize];
        let a_star = [0.25, 0.5, 0.75][rng.below(3) as usize];
        let u_star = rng.uniform(0.5, 1.1);
        let got = patch_confusion(&pred, &gt, &entropy, window, a_star, u_star).unwrap();
        if got != brute_patch_confusion(&pred, &gt, &entropy, window, a_star, u_star) {
            t.mismatches += 1;
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

pub fn metric_identities(seed: u64) -> Vec<Check> {
    let pc = |n_ac, n_au, n_ic, n_iu| PatchConfusion { n_ac, n_au, n_ic, n_iu };
    let mut out = vec![
        check("p_ac(9,.,1,.) = 0.9", pc(9, 4, 1, 7).p_ac() == Some(0.9), format!("{:?}", pc(9, 4, 1, 7).p_ac())),
        check("p_ui(.,.,1,3) = 0.75", pc(2, 5, 1, 3).p_ui() == Some(0.75), format!("{:?}", pc(2, 5, 1, 3).p_ui())),
        check("PAvPU(3,1,1,3) = 0.75", pc(3, 1, 1, 3).pavpu() == Some(0.75), format!("{:?}", pc(3, 1, 1, 3).pavpu())),
    ];

    let mut worst = 0.0f64;
    for c in 2..=16usize {
        let logits = Tensor::full(Shape::new(1, c, 2, 2), 0.37f32);
        for h in entropy_map(&logits) {
            worst = worst.max((h - (c as f64).ln()).abs());
        }
    }
    out.push(check("uniform entropy = ln C (1e-9)", worst <= 1e-9, format!("max |H - ln C| = {worst:e}")));

    let mut rng = SimRng::new(seed);
    let n = 10_000;
    let correct: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.7)).collect();
    let oracle_unc: Vec<f64> = correct.iter().map(|&c| if c { 0.1 } else { 0.9 }).collect();
    let p = prr(&correct, &oracle_unc).unwrap();
    out.push(check("PRR(oracle ordering) = 1.0", p == Some(1.0), format!("{p:?}")));

    let mut shuffled = correct.clone();
    rng.shuffle(&mut shuffled);
    let p = prr(&shuffled, &vec![0.5; n]).unwrap();
    out.push(check(
        "PRR(shuffled constant tie) in [-0.05, 0.05]",
        p.is_some_and(|v| (-0.05..=0.05).contains(&v)),
        format!("{p:?}"),
    ));
    out
}

/// Clean logits on an `h × w` map with five classes laid out as vertical
/// bands, every logit a multiple of 1/8 so shifts are exact.
fn banded_logits(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 5, h, w), |_, c, _, x| if c == x * 5 / w { 2.0 } else { 0.125 * c as f32 })
}

fn flip_pixels(logits: &Tensor<f32>, count: usize) -> Tensor<f32> {
    // Flip pixels in band 0 to class 1 (present elsewhere), keeping class sets.
    let mut f = logits.clone();
    let s = logits.shape();
    let mut done = 0;
    'outer: for y in 0..s.h {
        for x in 0..s.w / 5 {
            if done == count {
                break 'outer;
            }
            f.set(0, 1, y, x, 3.0);
            done += 1;
        }
    }
    assert_eq!(done, count);
    f
}

fn expect(out: &mut Vec<Check>, name: &str, clean: &Tensor<f32>, faulty: &Tensor<f32>, want: SdcClass) {
    let got = classify_sdc(clean, faulty).unwrap().class;
    out.push(check(name, got == want, format!("got {got}, want {want}")));
}

pub fn sdc_boundaries() -> Vec<Check> {
    let clean = banded_logits(64, 64);
    let mut out = Vec::new();
    expect(&mut out, "40 flipped pixels, same class set -> tolerable", &clean, &flip_pixels(&clean, 40), SdcClass::Tolerable);
    expect(&mut out, "41 flipped pixels -> critical", &clean, &flip_pixels(&clean, 41), SdcClass::Critical);

    let mut removed = clean.clone();
    for y in 0..64 {
        for x in (0..64).filter(|x| x * 5 / 64 == 4) {
            removed.set(0, 3, y, x, 9.0);
        }
    }
    expect(&mut out, "class disappears -> critical", &clean, &removed, SdcClass::Critical);

    // Four-class map; one pixel switching to the fifth class.
    let four = Tensor::from_fn(Shape::new(1, 5, 64, 64), |_, c, _, x| if c == x * 4 / 64 { 2.0 } else { 0.0 });
    let mut appeared = four.clone();
    appeared.set(0, 4, 0, 0, 5.0);
    expect(&mut out, "one pixel of a new class -> critical", &four, &appeared, SdcClass::Critical);

    let copy = Tensor::new(clean.shape(), clean.data().to_vec()).unwrap();
    expect(&mut out, "bit copy -> masked", &clean, &copy, SdcClass::Masked);
    expect(&mut out, "uniform logit shift -> no impact", &clean, &clean.map(|v| v + 0.5), SdcClass::NoImpact);
    out
}
