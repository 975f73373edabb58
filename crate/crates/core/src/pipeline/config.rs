//! Versioned JSON run configuration.
//!
//! A config file is merged key by key over a preset (`toy` or `paper`), so
//! it only needs the values it changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::networks::VQModelConfig;
use crate::prior_ar::{PriorConfig, TopContext};
use crate::training::TrainConfig;
use crate::vq_core::Level;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Pairs written by `simulate`.
    pub n_pairs: usize,
    /// Phantom volumes generated when no input volumes are given.
    pub n_volumes: usize,
    pub phantom_size: usize,
    pub phantom_shapes: usize,
    /// Motion states per simulated acquisition.
    pub n_states: usize,
    /// NIfTI volumes to simulate from instead of phantoms.
    #[serde(default)]
    pub volumes: Vec<PathBuf>,
}

/// Prior network settings shared by both levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSettings {
    pub channels: usize,
    pub n_blocks: usize,
    pub gated_res_per_block: usize,
    pub attention: bool,
    pub attention_dim: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: VQModelConfig,
    pub prior: PriorSettings,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => {
                let pc = PriorConfig::toy(Level::Top, 2, None);
                Self {
                    schema_version: SCHEMA_VERSION,
                    model: VQModelConfig::toy(),
                    prior: PriorSettings::from_config(&pc),
                    train: TrainConfig::toy(),
                    data: DataConfig {
                        n_pairs: 64,
                        n_volumes: 2,
                        phantom_size: 32,
                        phantom_shapes: 5,
                        n_states: 3,
                        volumes: Vec::new(),
                    },
                }
            }
            Preset::Paper => {
                let pc = PriorConfig::paper(Level::Top, 2, None);
                Self {
                    schema_version: SCHEMA_VERSION,
                    model: VQModelConfig::paper(),
                    prior: PriorSettings::from_config(&pc),
                    train: TrainConfig::paper(),
                    data: DataConfig {
                        n_pairs: 4000,
                        n_volumes: 100,
                        phantom_size: 160,
                        phantom_shapes: 8,
                        n_states: 3,
                        volumes: Vec::new(),
                    },
                }
            }
        }
    }

    /// Loads `path` over the preset.
    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, preset).map_err(|e| match e {
            Error::Json(j) => Error::data(path, j.to_string()),
            Error::Configuration(m) => Error::data(path, m),
            other => other,
        })
    }

    pub fn from_json(text: &str, preset: Preset) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text)?;
        match overlay.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::Configuration(format!(
                    "unsupported schema_version {v}"
                )))
            }
            None => return Err(Error::Configuration("config lacks schema_version".into())),
        }
        let mut base = serde_json::to_value(Self::preset(preset))?;
        merge(&mut base, overlay);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.prior_configs().0.validate()?;
        if self.train.crop % self.model.top_stride != 0 {
            return Err(Error::Configuration(format!(
                "crop {} not divisible by top_stride {}",
                self.train.crop, self.model.top_stride
            )));
        }
        if self.data.n_states == 0 {
            return Err(Error::Configuration("n_states must be at least 1".into()));
        }
        Ok(())
    }

    /// `(top, bottom)` prior configurations matching the model.
    pub fn prior_configs(&self) -> (PriorConfig, PriorConfig) {
        let k = self.model.codebook_k;
        let ctx = TopContext {
            k,
            factor: self.model.top_stride / self.model.bottom_stride,
        };
        (
            self.prior.to_config(Level::Top, k, None),
            self.prior.to_config(Level::Bottom, k, Some(ctx)),
        )
    }
}

impl PriorSettings {
    fn from_config(c: &PriorConfig) -> Self {
        Self {
            channels: c.channels,
            n_blocks: c.n_blocks,
            gated_res_per_block: c.gated_res_per_block,
            attention: c.attention,
            attention_dim: c.attention_dim,
            kernel: c.kernel,
        }
    }

    pub fn to_config(&self, level: Level, k: usize, context: Option<TopContext>) -> PriorConfig {
        PriorConfig {
            level,
            k,
            context,
            channels: self.channels,
            n_blocks: self.n_blocks,
            gated_res_per_block: self.gated_res_per_block,
            attention: self.attention,
            attention_dim: self.attention_dim,
            kernel: self.kernel,
            num_labels: crate::motion_sim::SeverityLabel::COUNT,
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
