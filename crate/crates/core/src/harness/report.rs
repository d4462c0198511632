//! Campaign report files.
//!
//! A campaign directory holds `rows.csv` (one line per corrupted
//! inference), `clean.csv` (fault-free mIoU per image), `aggregates.csv`,
//! `uncertainty.csv` and `campaign.json`. The aggregates are recomputed
//! from the first two files by [`reaggregate`], byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultsim::{FaultDescriptor, FaultRecord, InjectionPolicy};
use crate::harness::campaign::{Aggregates, CampaignReport, InjectionRow};
use crate::harness::config::{HardeningMode, ReportFormat};
use crate::metrics::{fmt_opt, SdcClass, UncertaintyReport};
use crate::segnet::EpochLog;

pub const ROWS_FILE: &str = "rows.csv";
pub const CLEAN_FILE: &str = "clean.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";
pub const UNCERTAINTY_FILE: &str = "uncertainty.csv";
pub const META_FILE: &str = "campaign.json";
pub const JSON_REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const ROW_HEADER: [&str; 11] = [
    "image_id",
    "layer_slot",
    "geom_kind",
    "y",
    "x",
    "h",
    "w",
    "channel",
    "magnitude",
    "sdc_class",
    "faulty_miou",
];

/// Flat CSV form of an [`InjectionRow`]. A skipped injection has
/// `geom_kind = none` and every fault column empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RowRecord {
    image_id: usize,
    layer_slot: Option<usize>,
    geom_kind: String,
    y: Option<usize>,
    x: Option<usize>,
    h: Option<usize>,
    w: Option<usize>,
    channel: Option<String>,
    magnitude: Option<String>,
    sdc_class: String,
    faulty_miou: f64,
}

impl From<&InjectionRow> for RowRecord {
    fn from(r: &InjectionRow) -> Self {
        let f = r.fault.as_ref().map(FaultRecord::from);
        RowRecord {
            image_id: r.image_id,
            layer_slot: f.as_ref().map(|f| f.layer_slot),
            geom_kind: f.as_ref().map_or_else(|| "none".to_string(), |f| f.geom_kind.clone()),
            y: f.as_ref().and_then(|f| f.y),
            x: f.as_ref().and_then(|f| f.x),
            h: f.as_ref().and_then(|f| f.h),
            w: f.as_ref().and_then(|f| f.w),
            channel: f.as_ref().map(|f| f.channel.clone()),
            magnitude: f.as_ref().map(|f| f.magnitude.clone()),
            sdc_class: r.sdc_class.as_str().to_string(),
            faulty_miou: r.faulty_miou,
        }
    }
}

impl TryFrom<RowRecord> for InjectionRow {
    type Error = Error;

    fn try_from(r: RowRecord) -> Result<Self> {
        let fault = if r.geom_kind == "none" {
            None
        } else {
            let missing = |what: &str| Error::Format(format!("fault row for image {} is missing {what}", r.image_id));
            let rec = FaultRecord {
                layer_slot: r.layer_slot.ok_or_else(|| missing("layer_slot"))?,
                geom_kind: r.geom_kind.clone(),
                y: r.y,
                x: r.x,
                h: r.h,
                w: r.w,
                channel: r.channel.clone().ok_or_else(|| missing("channel"))?,
                magnitude: r.magnitude.clone().ok_or_else(|| missing("magnitude"))?,
            };
            Some(FaultDescriptor::try_from(&rec)?)
        };
        Ok(InjectionRow {
            image_id: r.image_id,
            fault,
            sdc_class: SdcClass::parse(&r.sdc_class)?,
            faulty_miou: r.faulty_miou,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn rows_csv(rows: &[InjectionRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(ROW_HEADER)?;
    }
    for r in rows {
        w.serialize(RowRecord::from(r))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_rows(path: &Path) -> Result<Vec<InjectionRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = rd.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(ROW_HEADER) {
        return Err(Error::Format(format!(
            "{}: expected header {}",
            path.display(),
            ROW_HEADER.join(",")
        )));
    }
    rd.deserialize::<RowRecord>()
        .map(|r| InjectionRow::try_from(r.map_err(|e| csv_error(path, e))?))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CleanRecord {
    image_id: usize,
    clean_miou: f64,
}

pub fn clean_csv(clean_miou: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if clean_miou.is_empty() {
        w.write_record(["image_id", "clean_miou"])?;
    }
    for (image_id, &clean_miou) in clean_miou.iter().enumerate() {
        w.serialize(CleanRecord { image_id, clean_miou })?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_clean(path: &Path) -> Result<Vec<f64>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in rd.deserialize::<CleanRecord>().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.image_id != i {
            return Err(Error::Format(format!(
                "{}: expected image_id {i}, found {}",
                path.display(),
                rec.image_id
            )));
        }
        out.push(rec.clean_miou);
    }
    Ok(out)
}

pub fn aggregates_csv(a: &Aggregates) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(a)?;
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_aggregates(path: &Path) -> Result<Aggregates> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rd.deserialize()
        .next()
        .ok_or_else(|| Error::Format(format!("{}: no aggregate row", path.display())))?
        .map_err(|e| csv_error(path, e))
}

/// Uncertainty metrics for one condition, with `n/a` for undefined values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub condition: String,
    pub u_star: f64,
    pub window: usize,
    pub accuracy_threshold: f64,
    pub n_ac: u64,
    pub n_au: u64,
    pub n_ic: u64,
    pub n_iu: u64,
    pub p_ac: String,
    pub p_ui: String,
    pub pavpu: String,
    pub prr: String,
}

impl UncertaintyRecord {
    pub fn new(condition: &str, r: &UncertaintyReport) -> Self {
        Self {
            condition: condition.to_string(),
            u_star: r.u_star,
            window: r.window,
            accuracy_threshold: r.accuracy_threshold,
            n_ac: r.confusion.n_ac,
            n_au: r.confusion.n_au,
            n_ic: r.confusion.n_ic,
            n_iu: r.confusion.n_iu,
            p_ac: fmt_opt(r.p_ac),
            p_ui: fmt_opt(r.p_ui),
            pavpu: fmt_opt(r.pavpu),
            prr: fmt_opt(r.prr),
        }
    }
}

pub fn read_uncertainty(path: &Path) -> Result<Vec<UncertaintyRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    rd.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignMeta {
    pub mode: HardeningMode,
    pub injections_per_image: usize,
    pub policy: InjectionPolicy,
    pub nonfinite_outputs: usize,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    meta: &'a CampaignMeta,
    aggregates: &'a Aggregates,
    fault_free_uncertainty: &'a UncertaintyReport,
    fault_injected_uncertainty: &'a UncertaintyReport,
}

/// Writes the report into `dir`. Rows go first, aggregates afterwards.
pub fn write_report(dir: &Path, report: &CampaignReport, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        write_file(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    let meta = CampaignMeta {
        mode: report.mode,
        injections_per_image: report.injections_per_image,
        policy: report.policy.clone(),
        nonfinite_outputs: report.nonfinite_outputs,
    };
    put(ROWS_FILE, &rows_csv(&report.rows)?)?;
    put(CLEAN_FILE, &clean_csv(&report.clean_miou)?)?;
    if formats.contains(&ReportFormat::Csv) || formats.is_empty() {
        put(AGGREGATES_FILE, &aggregates_csv(&report.aggregates)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(UncertaintyRecord::new("fault_free", &report.fault_free_uncertainty))?;
        w.serialize(UncertaintyRecord::new("fault_injected", &report.fault_injected_uncertainty))?;
        put(UNCERTAINTY_FILE, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
    }
    if formats.contains(&ReportFormat::Json) {
        let json = serde_json::to_string_pretty(&JsonReport {
            meta: &meta,
            aggregates: &report.aggregates,
            fault_free_uncertainty: &report.fault_free_uncertainty,
            fault_injected_uncertainty: &report.fault_injected_uncertainty,
        })?;
        put(JSON_REPORT_FILE, format!("{json}\n").as_bytes())?;
    }
    put(META_FILE, format!("{}\n", serde_json::to_string_pretty(&meta)?).as_bytes())?;
    Ok(written)
}

/// Recomputes the aggregates of a campaign directory from its row files.
pub fn reaggregate(dir: &Path) -> Result<Aggregates> {
    let clean = read_clean(&dir.join(CLEAN_FILE))?;
    let rows = read_rows(&dir.join(ROWS_FILE))?;
    if let Some(r) = rows.iter().find(|r| r.image_id >= clean.len()) {
        return Err(Error::UnknownImage(r.image_id));
    }
    Ok(Aggregates::from_rows(&clean, &rows))
}

/// Per-run metrics gathered for a multi-run summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub aggregates: Aggregates,
    /// `(condition, record)` pairs; empty when no uncertainty file exists.
    pub uncertainty: Vec<UncertaintyRecord>,
}

pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let unc_path = dir.join(UNCERTAINTY_FILE);
    let uncertainty = if unc_path.exists() {
        read_uncertainty(&unc_path)?
    } else {
        Vec::new()
    };
    Ok(RunSummary {
        label: dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        aggregates: reaggregate(dir)?,
        uncertainty,
    })
}

const SUMMARY_METRICS: [&str; 14] = [
    "fault_free_miou",
    "fault_injected_miou",
    "masked_pct",
    "no_impact_pct",
    "tolerable_pct",
    "critical_pct",
    "fault_free_p_ac",
    "fault_free_p_ui",
    "fault_free_pavpu",
    "fault_free_prr",
    "fault_injected_p_ac",
    "fault_injected_p_ui",
    "fault_injected_pavpu",
    "fault_injected_prr",
];

fn summary_values(run: &RunSummary) -> Vec<Option<f64>> {
    let a = &run.aggregates;
    let mut v: Vec<Option<f64>> = [
        a.fault_free_miou,
        a.fault_injected_miou,
        a.masked_pct,
        a.no_impact_pct,
        a.tolerable_pct,
        a.critical_pct,
    ]
    .map(Some)
    .to_vec();
    for cond in ["fault_free", "fault_injected"] {
        let rec = run.uncertainty.iter().find(|r| r.condition == cond);
        for field in [
            rec.map(|r| &r.p_ac),
            rec.map(|r| &r.p_ui),
            rec.map(|r| &r.pavpu),
            rec.map(|r| &r.prr),
        ] {
            v.push(field.and_then(|s| s.parse::<f64>().ok()));
        }
    }
    v
}

/// Summary CSV: one line per run, then `mean` and `std` lines. The standard
/// deviation is the sample (n − 1) estimate and `n/a` for fewer than two
/// defined values.
pub fn summary_csv(runs: &[RunSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run"];
    header.extend(SUMMARY_METRICS);
    w.write_record(&header)?;
    let table: Vec<Vec<Option<f64>>> = runs.iter().map(summary_values).collect();
    for (run, values) in runs.iter().zip(&table) {
        let mut rec = vec![run.label.clone()];
        rec.extend(values.iter().map(|v| fmt_opt(*v)));
        w.write_record(&rec)?;
    }
    let mut means = vec!["mean".to_string()];
    let mut stds = vec!["std".to_string()];
    for col in 0..SUMMARY_METRICS.len() {
        let vals: Vec<f64> = table.iter().filter_map(|r| r[col]).collect();
        let n = vals.len() as f64;
        let m = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / n);
        let s = m.filter(|_| vals.len() >= 2).map(|m| {
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        means.push(fmt_opt(m));
        stds.push(fmt_opt(s));
    }
    w.write_record(&means)?;
    w.write_record(&stds)?;
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Per-epoch training log: `epoch, mean_loss, val_miou`.
pub fn train_log_csv(history: &[EpochLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "mean_loss", "val_miou"])?;
    for e in history {
        w.write_record([e.epoch.to_string(), e.mean_loss.to_string(), fmt_opt(e.val_miou)])?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}
