//! The run configuration file: one TOML document with a section per stage.
//!
//! ```toml
//! seed = 7
//!
//! [synth]
//! topics = 5
//!
//! [encoder]
//! text_dim = 128
//!
//! [network]
//! embedding_dim = 64
//!
//! [sampler]
//! window_secs = 3600
//!
//! [train]
//! learning_rate = 0.01
//!
//! [eval]
//! ks = [1, 5, 10]
//! ```
//!
//! Every key is optional and defaults to the values below.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::encoding::EncoderConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::sampling::SamplerConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Most recent interactions per user held out for testing.
    pub holdout_per_user: usize,
    /// Share of each user's training interactions used for validation in a λ sweep.
    pub val_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            holdout_per_user: 5,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub network: NetworkConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Validation for everything after data generation.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.network.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be a non-empty list of positive ranks".into()));
        }
        if self.eval.holdout_per_user == 0 {
            return Err(Error::Config("eval.holdout_per_user must be at least 1".into()));
        }
        Ok(())
    }
}
