//! Experiment plumbing: dataset generation, configuration, campaigns and reports.

pub mod campaign;
pub mod config;
pub mod dataset;
pub mod maps;
pub mod report;

pub use campaign::{calibrate, prepare_model, run_campaign, Aggregates, Calibration, CampaignReport, InjectionRow};
pub use config::{CampaignConfig, DataConfig, ExperimentConfig, HardeningMode, ReportFormat};
pub use dataset::{generate_dataset, load_split, save_dataset, ShapesDataset, Split};
pub use maps::{dump_maps, MapSelection};
