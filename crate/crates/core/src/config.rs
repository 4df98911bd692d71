//! Training configuration, read from TOML.
//!
//! ```toml
//! resolution = 64
//! stage_epochs = [10, 10, 10]   # or a single integer for every stage
//! finetune_epochs = 10
//! lr_stage = 0.001
//! lr_finetune = 0.0001
//! batch_size = 32
//! seed = 0
//! width_divisor = 16
//!
//! [split]
//! train = 0.8
//! val = 0.1
//!
//! [alae]
//! epochs = 120
//! lr = 0.0001
//!
//! [concepts]
//! lambda = 0.01
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alae::AlaeConfig;
use crate::autoencoder::{build_schedule, StageSchedule};
use crate::concepts::{LogisticOptions, DEFAULT_LAMBDA};
use crate::dataset::SplitFractions;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageEpochs {
    Uniform(usize),
    PerStage(Vec<usize>),
}

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs::Uniform(10)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptsConfig {
    pub lambda: f64,
    pub standardize: bool,
}

impl Default for ConceptsConfig {
    fn default() -> Self {
        ConceptsConfig {
            lambda: DEFAULT_LAMBDA,
            standardize: false,
        }
    }
}

impl ConceptsConfig {
    pub fn logistic_options(&self) -> LogisticOptions {
        LogisticOptions {
            lambda: self.lambda,
            standardize: self.standardize,
            ..LogisticOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub resolution: usize,
    pub stage_epochs: StageEpochs,
    pub finetune_epochs: usize,
    pub lr_stage: f64,
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Every filter count of the schedule is divided by this.
    pub width_divisor: usize,
    /// Capacity of the background batch queue.
    pub prefetch: usize,
    pub split: SplitFractions,
    pub alae: AlaeConfig,
    pub concepts: ConceptsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            resolution: 64,
            stage_epochs: StageEpochs::default(),
            finetune_epochs: 10,
            lr_stage: 1e-3,
            lr_finetune: 1e-4,
            batch_size: 32,
            seed: 0,
            width_divisor: 16,
            prefetch: 4,
            split: SplitFractions::default(),
            alae: AlaeConfig::default(),
            concepts: ConceptsConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn schedule(&self) -> Result<StageSchedule> {
        build_schedule(self.resolution)?.narrowed(self.width_divisor)
    }

    /// Epochs of greedy stage `k` (1-based).
    pub fn epochs_for_stage(&self, k: usize) -> Result<usize> {
        match &self.stage_epochs {
            StageEpochs::Uniform(e) => Ok(*e),
            StageEpochs::PerStage(list) => list
                .get(k.wrapping_sub(1))
                .copied()
                .ok_or_else(|| Error::Config(format!("stage_epochs has no entry for stage {k}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let schedule = self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        if let StageEpochs::PerStage(list) = &self.stage_epochs {
            if list.len() != schedule.len() {
                return bad(format!(
                    "stage_epochs lists {} stages, resolution {} has {}",
                    list.len(),
                    self.resolution,
                    schedule.len()
                ));
            }
        }
        for k in 1..=schedule.len() {
            if self.epochs_for_stage(k)? == 0 {
                return bad(format!("stage {k} needs at least one epoch"));
            }
        }
        if self.batch_size == 0 || self.alae.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, lr) in [("lr_stage", self.lr_stage), ("lr_finetune", self.lr_finetune), ("alae.lr", self.alae.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alae.ema_decay) {
            return bad(format!("alae.ema_decay {} outside [0, 1]", self.alae.ema_decay));
        }
        if !(self.alae.r1_gamma >= 0.0 && self.alae.r1_gamma.is_finite()) {
            return bad("alae.r1_gamma must be finite and >= 0".into());
        }
        if self.alae.latent_dim == 0 {
            return bad("alae.latent_dim must be positive".into());
        }
        if !(self.concepts.lambda >= 0.0 && self.concepts.lambda.is_finite()) {
            return bad("concepts.lambda must be finite and >= 0".into());
        }
        let SplitFractions { train, val } = self.split;
        if !(train > 0.0 && val >= 0.0 && train + val <= 1.0) {
            return bad(format!("split fractions train={train} val={val} are invalid"));
        }
        if self.prefetch == 0 {
            return bad("prefetch must be >= 1".into());
        }
        Ok(())
    }
}
