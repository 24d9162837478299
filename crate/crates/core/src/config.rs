//! Run configuration, read from TOML. Unknown keys are rejected and every
//! omitted key takes the default listed on its field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalkit::BaselineConfig;
use crate::pipeline::{LossWeights, ModelKind, ModelSpec, RegionConfig, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `protoseg` (default) or `protobb`.
    pub kind: ModelKind,
    /// Residual blocks; the grid scale is `2^num_blocks` (default 2).
    pub num_blocks: usize,
    /// Grid embedding dimension (default 16).
    pub reduced_channels: usize,
    /// Classes including background (default 2).
    pub classes: usize,
    /// Mixture components per class (default 5).
    pub prototypes_per_class: usize,
    /// Side of the square training input. Larger training images are cut
    /// into random crops of this size. Omitted: the side of the first
    /// training image.
    pub input_size: Option<usize>,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Protoseg,
            num_blocks: 2,
            reduced_channels: 16,
            classes: 2,
            prototypes_per_class: 5,
            input_size: None,
            loss: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Training seed (default 0).
    pub seed: u64,
    /// Dataset root with `images/`, `masks/`, `train.txt`, `val.txt`
    /// (default `data`).
    pub dataset: PathBuf,
    /// Output directory (default `runs/latest`).
    pub out: PathBuf,
    /// Synthetic generation settings for `generate-data`.
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    /// Proposal settings, used by `protobb` only.
    pub region: RegionConfig,
    pub schedule: Schedule,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/latest"),
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            region: RegionConfig::default(),
            schedule: Schedule::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The effective configuration with all defaults written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model spec for square inputs of side `input_size`.
    pub fn model_spec(&self, input_size: usize) -> Result<ModelSpec> {
        let m = &self.model;
        let spec = ModelSpec {
            kind: m.kind,
            encoder: EncoderConfig::new(m.num_blocks, m.reduced_channels, input_size)?,
            classes: m.classes,
            prototypes_per_class: m.prototypes_per_class,
            region: (m.kind == ModelKind::Protobb).then(|| self.region.clone()),
            loss: m.loss,
        };
        spec.validate()?;
        self.schedule.validate()?;
        Ok(spec)
    }
}
