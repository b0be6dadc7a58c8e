//! TOML run configuration shared by the command-line tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::train::{FinetuneConfig, PretrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Unlabeled pre-training corpus.
    pub manifest: Option<PathBuf>,
    /// Labeled fine-tuning pool; falls back to `manifest`.
    pub labeled_manifest: Option<PathBuf>,
    /// Evaluation split for fine-tuning runs.
    pub heldout_manifest: Option<PathBuf>,
    /// Utterances used for normalization statistics (0: all).
    pub stats_utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::toy(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.features.num_mel_bins != self.model.feature_dim {
            return Err(Error::Config(format!(
                "features.num_mel_bins = {} but model.feature_dim = {}",
                self.features.num_mel_bins, self.model.feature_dim
            )));
        }
        self.pretrain.validate(&self.model)?;
        self.finetune.validate(&self.model)
    }

    /// A path that must be present, reported by its dotted key when missing.
    pub fn require(&self, key: &str) -> Result<&Path> {
        let value = match key {
            "data.manifest" => self.data.manifest.as_deref(),
            "data.labeled_manifest" => self.data.labeled_manifest.as_deref().or(self.data.manifest.as_deref()),
            "data.heldout_manifest" => self.data.heldout_manifest.as_deref(),
            _ => None,
        };
        value.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }
}
