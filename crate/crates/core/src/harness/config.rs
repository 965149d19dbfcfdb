//! Run configuration: one TOML file with a section per subsystem, every
//! field defaulted, and a content fingerprint recorded in all reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::ContrastiveConfig;
use crate::data::DatasetManifest;
use crate::encoders::EncoderConfig;
use crate::imputation::{ImputeConfig, ImputeMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset file to load; when absent the dataset is generated in memory
    /// from the manifest fields below.
    pub path: Option<PathBuf>,
    #[serde(flatten)]
    pub manifest: DatasetManifest,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            manifest: DatasetManifest::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub omega: f32,
    pub drop_prob: f32,
    pub base_width: usize,
    pub time_dim: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            timesteps: 200,
            omega: 1.0,
            drop_prob: 0.1,
            base_width: 32,
            time_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Held-out records (taken from the end of the dataset) used for
    /// validation metrics.
    pub val_count: usize,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Reverse steps used when sampling for evaluation.
    pub sample_steps: usize,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            seed: 7,
            val_count: 32,
            checkpoint_every: 0,
            sample_steps: 40,
            log_every: 50,
        }
    }
}

/// Independent ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AblationConfig {
    pub disable_augmentation: bool,
    pub disable_modal: bool,
    pub disable_content: bool,
    pub disable_inter_sphere: bool,
    pub impute_mode: ImputeModeDefault,
}

/// Wrapper so the mode defaults to dynamic inside `#[serde(default)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImputeModeDefault(pub ImputeMode);

impl Default for ImputeModeDefault {
    fn default() -> Self {
        ImputeModeDefault(ImputeMode::Dynamic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub impute: ImputeConfig,
    pub diffusion: DiffusionSection,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_str_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        Self::from_str_toml(&text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn impute_mode(&self) -> ImputeMode {
        self.ablation.impute_mode.0
    }
}

/// Content hash of the serialized config; the first 16 hex digits.
pub fn fingerprint(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
