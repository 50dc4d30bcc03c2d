//! TOML run configuration and run manifests.
//!
//! A pretrain config file has three optional tables; missing keys take the
//! defaults below.
//!
//! ```toml
//! [model]
//! d_model = 64
//! n_layers = 2
//! n_heads = 4
//!
//! [training]
//! lambda = 0.2
//! text_mask_ratio = 0.3
//! image_base_ratio = 0.3
//! mask_tau = 0.1
//! epochs = 30
//! # steps = 200          # overrides epochs
//! batch_size = 32
//! peak_lr = 3e-4
//! encoder_lr = 1e-5
//! weight_decay = 0.05
//! warmup_fraction = 0.1
//! seed = 0
//! text_mode = "structured"   # or "findings_only"
//!
//! [eval]
//! tau = 1.0
//! scoring = "w2"             # or "kl"
//! batch_size = 64
//! ```
//!
//! A datagen spec file has a `[dataset]` table (see [`DatasetSpec`]) and a
//! top-level `max_len`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
        }
    }
}

impl ModelConfig {
    /// Full encoder config with the data-dependent sizes filled in.
    pub fn encoder(&self, vocab_size: usize, max_len: usize, patch_dim: usize, grid_h: usize, grid_w: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            vocab_size,
            max_len,
            patch_dim,
            grid_h,
            grid_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl PretrainConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let c: Self = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        c.training.validate()?;
        c.eval.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub dataset: DatasetSpec,
    pub max_len: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            max_len: 128,
        }
    }
}

impl DatagenConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let c: Self = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        c.dataset.validate()?;
        if c.max_len < 8 {
            return Err(Error::Config("max_len must be at least 8".into()));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read(path)?)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// SHA-256 of the compact JSON form with object keys sorted.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_string(&v)?.as_bytes())))
}

/// Record of one CLI invocation, written before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub crate_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new<T: Serialize>(subcommand: &str, seed: u64, config: &T) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            subcommand: subcommand.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: canonical_hash(&config)?,
            config,
            artifacts: BTreeMap::new(),
        })
    }

    pub fn artifact(mut self, key: &str, path: &Path) -> Self {
        self.artifacts.insert(key.to_string(), path.display().to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::io::write_json(&dir.join("manifest.json"), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        crate::io::read_json(&dir.join("manifest.json"))
    }
}
