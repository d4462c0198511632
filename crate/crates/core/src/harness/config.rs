//! Experiment configuration, read from JSON with snake_case field names.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultsim::InjectionPolicy;
use crate::hardening::ActivationKind;
use crate::segnet::{ModelConfig, TrainConfig};

/// Hardening configuration compared in a campaign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HardeningMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "fat")]
    Fat,
    #[serde(rename = "relu6")]
    Relu6,
    #[serde(rename = "relu6+fat")]
    Relu6Fat,
    #[serde(rename = "amms")]
    Amms,
    #[serde(rename = "relumax")]
    ReluMax,
}

impl HardeningMode {
    pub const ALL: [HardeningMode; 6] = [
        HardeningMode::None,
        HardeningMode::Fat,
        HardeningMode::Relu6,
        HardeningMode::Relu6Fat,
        HardeningMode::Amms,
        HardeningMode::ReluMax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HardeningMode::None => "none",
            HardeningMode::Fat => "fat",
            HardeningMode::Relu6 => "relu6",
            HardeningMode::Relu6Fat => "relu6+fat",
            HardeningMode::Amms => "amms",
            HardeningMode::ReluMax => "relumax",
        }
    }

    /// Activation the checkpoint must have been trained with.
    pub fn activation_kind(self) -> ActivationKind {
        match self {
            HardeningMode::None | HardeningMode::Fat | HardeningMode::Amms => ActivationKind::Relu,
            HardeningMode::Relu6 | HardeningMode::Relu6Fat => ActivationKind::Relu6,
            HardeningMode::ReluMax => ActivationKind::ReluMax,
        }
    }

    pub fn fault_aware(self) -> bool {
        matches!(self, HardeningMode::Fat | HardeningMode::Relu6Fat)
    }

    pub fn uses_amms(self) -> bool {
        self == HardeningMode::Amms
    }

    /// `base` with the activation and fault-aware flag this mode trains with.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            activation_kind: self.activation_kind(),
            fault_aware_training: self.fault_aware(),
            ..base.clone()
        }
    }
}

impl fmt::Display for HardeningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HardeningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|m| m.as_str()).collect();
            Error::invalid(format!("unknown hardening mode {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 500,
            val_count: 100,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub checkpoint: Option<PathBuf>,
    pub mode: HardeningMode,
    pub policy: InjectionPolicy,
    pub injections_per_image: usize,
    pub output_dir: Option<PathBuf>,
    pub formats: Vec<ReportFormat>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            mode: HardeningMode::None,
            policy: InjectionPolicy::default(),
            injections_per_image: 10,
            output_dir: None,
            formats: vec![ReportFormat::Csv],
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.injections_per_image == 0 {
            return Err(Error::invalid("injections_per_image must be >= 1"));
        }
        self.policy.validate()
    }
}

/// Everything one experiment needs; every section is optional in the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub campaign: CampaignConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.model.validate()?;
        cfg.campaign.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
