//! Pipeline configuration, stored as TOML with one section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationConfig;
use crate::correspondence::SimilarityKernelConfig;
use crate::error::{Error, Result};
use crate::evaluate::TrialConfig;
use crate::imaging::GridConfig;
use crate::ranklearn::TrainConfig;
use crate::saliency::SaliencyConfig;
use crate::salmatch::FusionConfig;

/// Environment variable that overrides `trial.seed`.
pub const SEED_ENV: &str = "REID_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub descriptors: Option<PathBuf>,
    pub saliency: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Resize every image to `[height, width]` before extraction.
    pub image_size: Option<[usize; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    pub kernel: SimilarityKernelConfig,
    pub saliency: SaliencyConfig,
    pub train: TrainConfig,
    pub trial: TrialConfig,
    pub fusion: FusionConfig,
    pub annotation: AnnotationConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.kernel.validate()?;
        self.saliency.validate()?;
        self.train.validate()?;
        self.trial.validate()?;
        self.fusion.validate()?;
        self.annotation.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `REID_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.trial.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }
}
