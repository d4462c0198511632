//! `fseg`: generate data, train, calibrate, run fault-injection campaigns
//! and summarize their reports.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or format errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fseg::harness::report::{self, load_run, read_rows, summary_csv, train_log_csv, META_FILE, ROWS_FILE, SUMMARY_FILE};
use fseg::harness::{
    calibrate, dump_maps, generate_dataset, load_split, prepare_model, run_campaign, save_dataset, Calibration,
    ExperimentConfig, HardeningMode, MapSelection, Split,
};
use fseg::segnet::{load_checkpoint, save_checkpoint, train, Model};
use fseg::{Error, Result};

const CHECKPOINT_FILE: &str = "model.ckpt";
const TRAIN_LOG_FILE: &str = "train_log.csv";
const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Parser, Debug)]
#[command(name = "fseg", version, about = "Fault-injection toolkit for small segmentation networks")]
struct Cli {
    /// Overrides the seed of the selected stage (data, training or campaign).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON experiment configuration (sections: data, model, train, campaign).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory written by `gen-data`.
    #[arg(long, value_name = "DIR", default_value = "data")]
    data: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData,
    /// Train a checkpoint for one hardening mode.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Hardening mode (none, fat, relu6, relu6+fat, amms, relumax).
        #[arg(long)]
        mode: Option<HardeningMode>,
    },
    /// Collect AMMS statistics and the uncertainty threshold for a checkpoint.
    Calibrate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Run a fault-injection campaign over the validation split.
    Campaign {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mode: Option<HardeningMode>,
        /// Calibration file; defaults to calibration.json beside the checkpoint.
        #[arg(long, value_name = "PATH")]
        calibration: Option<PathBuf>,
        #[arg(long)]
        injections_per_image: Option<usize>,
    },
    /// Recompute aggregates from campaign rows and summarize several runs.
    Report {
        /// Campaign output directories.
        #[arg(required = true, value_name = "RUN_DIR")]
        runs: Vec<PathBuf>,
    },
    /// Write clean and faulty prediction maps as PPM images.
    DumpMaps {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Campaign output directory holding rows.csv and campaign.json.
        #[arg(long, value_name = "DIR")]
        report: PathBuf,
        #[arg(long, value_name = "PATH")]
        calibration: Option<PathBuf>,
        /// Dump the injection with the lowest faulty mIoU.
        #[arg(long, conflicts_with = "image")]
        worst: bool,
        /// Dump every injection of these validation images.
        #[arg(long, value_name = "ID")]
        image: Vec<usize>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(cli_out: &Option<PathBuf>, fallback: Option<&PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| fallback.cloned())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn read_calibration(explicit: Option<&Path>, checkpoint: &Path) -> Result<Option<Calibration>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let beside = checkpoint.with_file_name(CALIBRATION_FILE);
            if !beside.exists() {
                return Ok(None);
            }
            beside
        }
    };
    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData => {
            let d = &cfg.data;
            let seed = cli.seed.unwrap_or(d.seed);
            let dir = out_dir(&cli.out, None);
            let (train, val) = generate_dataset(seed, d.train_count, d.val_count, d.height, d.width)?;
            save_dataset(&dir, &train, &val)?;
            println!(
                "wrote {} train and {} val images ({}x{}, seed {seed}) to {}",
                train.len(),
                val.len(),
                d.height,
                d.width,
                dir.display()
            );
        }
        Command::Train { data, mode } => {
            let mode = mode.unwrap_or(cfg.campaign.mode);
            let mut train_cfg = cfg.train.clone();
            if let Some(s) = cli.seed {
                train_cfg.seed = s;
            }
            let dir = out_dir(&cli.out, None);
            let train_set = load_split(&data.data, Split::Train)?;
            let val_set = load_split(&data.data, Split::Val)?;
            let mut model = Model::build(mode.model_config(&cfg.model), train_cfg.seed)?;
            let rep = train(&mut model, train_set.as_labeled(), Some(val_set.as_labeled()), &train_cfg)?;
            write(&dir.join(TRAIN_LOG_FILE), &train_log_csv(&rep.history)?)?;
            let ckpt = dir.join(CHECKPOINT_FILE);
            save_checkpoint(&model, &ckpt)?;
            let last = rep.history.last();
            println!(
                "trained mode {mode} for {} epochs: final loss {}, val mIoU {}; checkpoint {}",
                rep.history.len(),
                last.map_or_else(|| "n/a".into(), |e| e.mean_loss.to_string()),
                fseg::metrics::fmt_opt(last.and_then(|e| e.val_miou)),
                ckpt.display()
            );
        }
        Command::Calibrate { data, checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            let train_set = load_split(&data.data, Split::Train)?;
            let val_set = load_split(&data.data, Split::Val)?;
            let cal = calibrate(&model, &train_set.images, &val_set.images)?;
            let dir = out_dir(&cli.out, None);
            let path = dir.join(CALIBRATION_FILE);
            let json = serde_json::to_string_pretty(&cal).map_err(Error::from)?;
            write(&path, format!("{json}\n").as_bytes())?;
            println!("u* = {}; AMMS stats for {} slots written to {}", cal.u_star, cal.amms.layers.len(), path.display());
        }
        Command::Campaign {
            data,
            checkpoint,
            mode,
            calibration,
            injections_per_image,
        } => {
            let mut c = cfg.campaign.clone();
            if let Some(s) = cli.seed {
                c.policy.seed = s;
            }
            let mode = mode.unwrap_or(c.mode);
            let injections = injections_per_image.unwrap_or(c.injections_per_image);
            let checkpoint = checkpoint
                .or(c.checkpoint.clone())
                .ok_or_else(|| Error::InvalidArgument("campaign needs --checkpoint or campaign.checkpoint".into()))?;
            let dir = out_dir(&cli.out, c.output_dir.as_ref());
            let model = load_checkpoint(&checkpoint)?;
            let cal = read_calibration(calibration.as_deref(), &checkpoint)?;
            let model = prepare_model(model, mode, cal.as_ref())?;
            let val_set = load_split(&data.data, Split::Val)?;
            let rep = run_campaign(&model, val_set.as_labeled(), mode, &c.policy, injections)?;
            report::write_report(&dir, &rep, &c.formats)?;
            let a = &rep.aggregates;
            println!(
                "mode {mode}: {} injections, fault-free mIoU {}, fault-injected mIoU {}, critical {}%; report in {}",
                a.injections,
                a.fault_free_miou,
                a.fault_injected_miou,
                a.critical_pct,
                dir.display()
            );
        }
        Command::Report { runs } => {
            let summaries = runs.iter().map(|r| load_run(r)).collect::<Result<Vec<_>>>()?;
            let dir = out_dir(&cli.out, None);
            for s in &summaries {
                let bytes = report::aggregates_csv(&s.aggregates)?;
                write(&dir.join(format!("{}_aggregates.csv", s.label)), &bytes)?;
            }
            let summary = summary_csv(&summaries)?;
            write(&dir.join(SUMMARY_FILE), &summary)?;
            print!("{}", String::from_utf8_lossy(&summary));
        }
        Command::DumpMaps {
            data,
            checkpoint,
            report: report_dir,
            calibration,
            worst,
            image,
        } => {
            let selection = match (worst, image.is_empty()) {
                (true, _) => MapSelection::Worst,
                (false, false) => MapSelection::Images(image),
                (false, true) => return Err(Error::InvalidArgument("dump-maps needs --worst or --image".into())),
            };
            let meta_path = report_dir.join(META_FILE);
            let meta_text = fs::read_to_string(&meta_path).map_err(|e| io_error(&meta_path, e))?;
            let meta: report::CampaignMeta =
                serde_json::from_str(&meta_text).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
            let rows = read_rows(&report_dir.join(ROWS_FILE))?;
            let cal = read_calibration(calibration.as_deref(), &checkpoint)?;
            let model = prepare_model(load_checkpoint(&checkpoint)?, meta.mode, cal.as_ref())?;
            let val_set = load_split(&data.data, Split::Val)?;
            let dir = out_dir(&cli.out, None);
            let files = dump_maps(&model, val_set.as_labeled(), &rows, &selection, &dir)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
