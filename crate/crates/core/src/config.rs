//! The versioned run configuration and its provenance hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::SamplerConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::heads::{HeadConfig, HeadVariant};
use crate::model::{AnchorConfig, ModelConfig, ProposeConfig};
use crate::pyramid::{EncoderSpec, PyramidConfig};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub train_images: usize,
    /// Validation images follow the training images in the synthetic stream.
    pub val_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { synth: SynthConfig::default(), train_images: 1000, val_images: 200 }
    }
}

/// Every tunable of a run. Missing sections take their defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub propose: ProposeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 7,
            model: desk_model(HeadVariant::GcnNs, true),
            data: DataConfig::default(),
            train: TrainConfig {
                epochs: 20,
                sampler: SamplerConfig { anchors_per_image: 256, images_per_batch: 2 },
                ..TrainConfig::default()
            },
            propose: ProposeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Toy encoder and narrow decoder sized for single-core training on
/// 128 × 128 synthetic images.
pub fn desk_model(variant: HeadVariant, position_sensitive: bool) -> ModelConfig {
    ModelConfig {
        pyramid: PyramidConfig {
            decoder_channels: 16,
            encoder: EncoderSpec::Toy { widths: [8, 16, 32, 64] },
            ..PyramidConfig::default()
        },
        head: HeadConfig {
            gcn_mid_width: 8,
            lk_width: 8,
            large_kernel: 7,
            ..HeadConfig::new(variant, position_sensitive)
        },
        anchors: AnchorConfig::default(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: e.span().map(|s| format!("byte {}", s.start)).unwrap_or_else(|| "config".into()),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?).map_err(|e| match e {
            Error::Parse { path: at, message } => Error::Parse { path: format!("{}: {at}", path.display()), message },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} is not {CONFIG_VERSION}", self.version)));
        }
        self.model.validate()?;
        self.data.synth.validate()?;
        self.train.sampler.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))[..16].to_string()
    }
}
