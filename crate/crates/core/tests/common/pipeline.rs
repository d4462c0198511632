//! End-to-end trend experiment: one dataset, four trained checkpoints, AMMS
//! calibrated on the unhardened one, and a campaign per mode.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use fseg::harness::report::write_report;
use fseg::harness::{
    calibrate, generate_dataset, prepare_model, run_campaign, CampaignReport, DataConfig, HardeningMode, ReportFormat,
    ShapesDataset,
};
use fseg::segnet::{to_bytes, train, TrainConfig};
use fseg::{InjectionPolicy, Model, ModelConfig};

pub const TRAINED_MODES: [HardeningMode; 4] = [
    HardeningMode::None,
    HardeningMode::Relu6,
    HardeningMode::Relu6Fat,
    HardeningMode::ReluMax,
];

#[derive(Clone, Debug)]
pub struct Settings {
    pub data_seed: u64,
    pub train_seed: u64,
    pub campaign_seed: u64,
    pub epochs: usize,
    pub injections_per_image: usize,
    pub threads: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            data_seed: 2024,
            train_seed: 7,
            campaign_seed: 99,
            epochs: 30,
            injections_per_image: 10,
            threads: 1,
        }
    }
}

pub struct Output {
    pub reports: BTreeMap<HardeningMode, CampaignReport>,
    pub models: BTreeMap<HardeningMode, Model>,
    pub train: ShapesDataset,
    pub val: ShapesDataset,
    /// Every written file (reports, checkpoints, calibration) keyed by relative path.
    pub files: BTreeMap<String, Vec<u8>>,
    pub elapsed: Duration,
}

pub fn run(dir: &Path, s: &Settings) -> Output {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(s.threads).build().unwrap();
    pool.install(|| run_inner(dir, s))
}

fn run_inner(dir: &Path, s: &Settings) -> Output {
    let start = Instant::now();
    let d = DataConfig::default();
    let (train_set, val_set) = generate_dataset(s.data_seed, d.train_count, d.val_count, d.height, d.width).unwrap();
    let train_cfg = TrainConfig {
        epochs: s.epochs,
        seed: s.train_seed,
        ..TrainConfig::default()
    };
    let policy = InjectionPolicy {
        seed: s.campaign_seed,
        ..InjectionPolicy::default()
    };

    let mut models = BTreeMap::new();
    let mut reports = BTreeMap::new();
    let mut files = BTreeMap::new();
    let mut campaign = |mode: HardeningMode, model: Model, files: &mut BTreeMap<String, Vec<u8>>| {
        let report = run_campaign(&model, val_set.as_labeled(), mode, &policy, s.injections_per_image).unwrap();
        let out = dir.join(mode.as_str());
        for path in write_report(&out, &report, &[ReportFormat::Csv, ReportFormat::Json]).unwrap() {
            let name = format!("{}/{}", mode.as_str(), path.file_name().unwrap().to_string_lossy());
            files.insert(name, fs::read(&path).unwrap());
        }
        reports.insert(mode, report);
    };

    for mode in TRAINED_MODES {
        let mut model = Model::build(mode.model_config(&ModelConfig::default()), s.train_seed).unwrap();
        train(&mut model, train_set.as_labeled(), Some(val_set.as_labeled()), &train_cfg).unwrap();
        files.insert(format!("{}/model.ckpt", mode.as_str()), to_bytes(&model));
        campaign(mode, prepare_model(model.clone(), mode, None).unwrap(), &mut files);
        models.insert(mode, model);
    }

    let base = &models[&HardeningMode::None];
    let cal = calibrate(base, &train_set.images, &val_set.images).unwrap();
    files.insert("amms/calibration.json".into(), serde_json::to_vec_pretty(&cal).unwrap());
    campaign(HardeningMode::Amms, prepare_model(base.clone(), HardeningMode::Amms, Some(&cal)).unwrap(), &mut files);

    Output {
        reports,
        models,
        train: train_set,
        val: val_set,
        files,
        elapsed: start.elapsed(),
    }
}
