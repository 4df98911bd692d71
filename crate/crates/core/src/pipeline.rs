//! Resumable training state for both phases and its mapping onto
//! checkpoint bundles.
//!
//! Both trainers advance one batch per [`AeTrainer::step`] /
//! [`AlaeRun::step`] call. Batch order is a pure function of the seed, the
//! part being trained and the epoch, so a state restored from a checkpoint
//! continues exactly where the saved one would have.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::alae::{Alae, AlaeTrainer, EmaShadow};
use crate::autoencoder::{stage_seed, Autoencoder, StageSchedule, TrainScope};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, Phase, Tensor};
use crate::config::Config;
use crate::dataset::{epoch_order, ImageSet};
use crate::nn::{Adam, AdamConfig, AdamSlot, Parameterized};
use crate::{Error, Result};

/// Mean losses of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub part: String,
    /// 1-based.
    pub epoch: usize,
    pub epochs: usize,
    pub losses: BTreeMap<String, f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} epoch {}/{}", self.part, self.epoch, self.epochs)?;
        for (k, v) in &self.losses {
            write!(f, " {k}={v:.6}")?;
        }
        Ok(())
    }
}

fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    epoch_order(n, seed, epoch as u64)
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

// ---------------------------------------------------------------------------
// phase 1

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AePart {
    Stage(usize),
    Finetune,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeProgress {
    pub part: AePart,
    /// Completed epochs of the current part.
    pub epoch: usize,
    /// Completed batches of the current epoch.
    pub batch: usize,
    pub loss_sum: f64,
    pub history: Vec<EpochLog>,
}

/// Greedy stage-by-stage training followed by fine-tuning, one batch at a
/// time. Running it to completion is equivalent to
/// [`crate::autoencoder::train_stage_greedy`] for every stage followed by
/// [`crate::autoencoder::finetune_all`].
#[derive(Clone, Debug)]
pub struct AeTrainer {
    pub config: Config,
    pub adam: Adam<f32>,
    pub progress: AeProgress,
    stages: usize,
}

impl AeTrainer {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let stages = config.schedule()?.len();
        Ok(AeTrainer {
            adam: Adam::new(AdamConfig::new(config.lr_stage)),
            config: config.clone(),
            progress: AeProgress {
                part: AePart::Stage(1),
                epoch: 0,
                batch: 0,
                loss_sum: 0.0,
                history: Vec::new(),
            },
            stages,
        })
    }

    pub fn is_done(&self) -> bool {
        self.progress.part == AePart::Done
    }

    fn epochs_of(&self, part: AePart) -> Result<usize> {
        match part {
            AePart::Stage(k) => self.config.epochs_for_stage(k),
            AePart::Finetune => Ok(self.config.finetune_epochs),
            AePart::Done => Ok(0),
        }
    }

    fn label(part: AePart) -> String {
        match part {
            AePart::Stage(k) => format!("stage {k}"),
            AePart::Finetune => "finetune".into(),
            AePart::Done => "done".into(),
        }
    }

    fn advance(&mut self) -> Result<()> {
        let next = match self.progress.part {
            AePart::Stage(k) if k < self.stages => AePart::Stage(k + 1),
            AePart::Stage(_) => AePart::Finetune,
            AePart::Finetune | AePart::Done => AePart::Done,
        };
        self.progress.part = next;
        self.progress.epoch = 0;
        self.adam = Adam::new(AdamConfig::new(match next {
            AePart::Stage(_) => self.config.lr_stage,
            _ => self.config.lr_finetune,
        }));
        if next == AePart::Finetune && self.config.finetune_epochs == 0 {
            self.advance()?;
        }
        Ok(())
    }

    /// Trains on one batch. Returns the epoch summary when the batch closed
    /// an epoch.
    pub fn step(&mut self, ae: &mut Autoencoder<f32>, data: &ImageSet) -> Result<Option<EpochLog>> {
        let part = self.progress.part;
        let (k, scope, seed) = match part {
            AePart::Stage(k) => (k, TrainScope::Stage(k), stage_seed(self.config.seed, k)),
            AePart::Finetune => (self.stages, TrainScope::All, stage_seed(self.config.seed, 0)),
            AePart::Done => return Err(Error::Training("autoencoder training already finished".into())),
        };
        if data.is_empty() {
            return Err(Error::Training("no training data".into()));
        }
        let batches = batch_indices(data.len(), self.config.batch_size, seed, self.progress.epoch);
        let x = data.images.select(Axis(0), &batches[self.progress.batch]);
        self.progress.loss_sum += ae.train_step(&mut self.adam, &x, k, scope)?;
        self.progress.batch += 1;
        if self.progress.batch < batches.len() {
            return Ok(None);
        }
        let log = EpochLog {
            part: Self::label(part),
            epoch: self.progress.epoch + 1,
            epochs: self.epochs_of(part)?,
            losses: BTreeMap::from([("mae".to_string(), self.progress.loss_sum / batches.len() as f64)]),
        };
        self.progress.history.push(log.clone());
        self.progress.batch = 0;
        self.progress.loss_sum = 0.0;
        self.progress.epoch += 1;
        if self.progress.epoch >= self.epochs_of(part)? {
            self.advance()?;
        }
        Ok(Some(log))
    }

    /// Trains until the current epoch closes.
    pub fn run_epoch(&mut self, ae: &mut Autoencoder<f32>, data: &ImageSet) -> Result<EpochLog> {
        loop {
            if let Some(log) = self.step(ae, data)? {
                return Ok(log);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// phase 2

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlaeProgress {
    pub epoch: usize,
    pub batch: usize,
    /// Running sums of discriminator, generator, reconstruction and R1
    /// losses over the current epoch.
    pub sums: [f64; 4],
    pub history: Vec<EpochLog>,
}

/// Phase 2 training driver around [`AlaeTrainer`].
#[derive(Clone, Debug)]
pub struct AlaeRun {
    pub config: Config,
    pub trainer: AlaeTrainer<f32>,
    pub progress: AlaeProgress,
}

/// Seed of the Phase 2 batch order and trainer RNG.
pub fn alae_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(0xA1AE)
}

impl AlaeRun {
    pub fn new(model: &Alae<f32>, config: &Config) -> Result<Self> {
        config.validate()?;
        Ok(AlaeRun {
            trainer: AlaeTrainer::new(model, config.alae.clone(), alae_seed(config.seed))?,
            config: config.clone(),
            progress: AlaeProgress {
                epoch: 0,
                batch: 0,
                sums: [0.0; 4],
                history: Vec::new(),
            },
        })
    }

    pub fn is_done(&self) -> bool {
        self.progress.epoch >= self.config.alae.epochs
    }

    pub fn step(&mut self, model: &mut Alae<f32>, data: &ImageSet) -> Result<Option<EpochLog>> {
        if self.is_done() {
            return Err(Error::Training("adversarial training already finished".into()));
        }
        if data.is_empty() {
            return Err(Error::Training("no training data".into()));
        }
        let batches = batch_indices(
            data.len(),
            self.config.alae.batch_size,
            alae_seed(self.config.seed),
            self.progress.epoch,
        );
        let x = data.images.select(Axis(0), &batches[self.progress.batch]);
        let l = self.trainer.step(model, &x)?;
        for (s, v) in self.progress.sums.iter_mut().zip([l.discriminator, l.generator, l.reconstruction, l.r1]) {
            *s += v;
        }
        self.progress.batch += 1;
        if self.progress.batch < batches.len() {
            return Ok(None);
        }
        let n = batches.len() as f64;
        let [d, g, r, r1] = self.progress.sums;
        let mut losses = BTreeMap::from([
            ("loss_d".to_string(), d / n),
            ("loss_g".to_string(), g / n),
            ("recon".to_string(), r / n),
        ]);
        if self.config.alae.r1_gamma > 0.0 {
            losses.insert("r1".into(), r1 / n);
        }
        let log = EpochLog {
            part: "alae".into(),
            epoch: self.progress.epoch + 1,
            epochs: self.config.alae.epochs,
            losses,
        };
        self.progress.history.push(log.clone());
        self.progress.epoch += 1;
        self.progress.batch = 0;
        self.progress.sums = [0.0; 4];
        self.trainer.epochs_done = self.progress.epoch;
        Ok(Some(log))
    }

    pub fn run_epoch(&mut self, model: &mut Alae<f32>, data: &ImageSet) -> Result<EpochLog> {
        loop {
            if let Some(log) = self.step(model, data)? {
                return Ok(log);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoint mapping

#[derive(Clone, Debug)]
pub struct AeState {
    pub ae: Autoencoder<f32>,
    pub trainer: AeTrainer,
}

impl AeState {
    pub fn new(config: &Config) -> Result<Self> {
        Ok(AeState {
            ae: Autoencoder::new(config.schedule()?, config.seed),
            trainer: AeTrainer::new(config)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AlaeState {
    pub model: Alae<f32>,
    pub run: AlaeRun,
    /// Phase 1 epoch logs, kept for reports.
    pub ae_history: Vec<EpochLog>,
}

impl AlaeState {
    /// Wraps a fully trained autoencoder. Phase 2 settings come from
    /// `config`; the schedule must match the autoencoder's.
    pub fn from_autoencoder(ae: AeState, config: &Config) -> Result<Self> {
        if !ae.trainer.is_done() {
            return Err(Error::Training("phase 1 has not finished; resume train-ae first".into()));
        }
        if config.schedule()? != ae.ae.schedule {
            return Err(Error::Config("config schedule differs from the checkpoint's".into()));
        }
        let model = Alae::from_autoencoder(ae.ae, config.alae.latent_dim, alae_seed(config.seed) ^ 1);
        Ok(AlaeState {
            run: AlaeRun::new(&model, config)?,
            model,
            ae_history: ae.trainer.progress.history,
        })
    }

    /// The model with EMA weights in `F` and `G`, used for all generation.
    pub fn ema_model(&self) -> Alae<f32> {
        self.model.with_ema(&self.run.trainer.ema)
    }
}

#[derive(Clone, Debug)]
pub enum PipelineState {
    Autoencoder(AeState),
    Alae(AlaeState),
}

fn put_params(prefix: &str, module: &dyn Parameterized<f32>, out: &mut BTreeMap<String, Tensor>) {
    module.visit(prefix, &mut |name, p| {
        out.insert(
            name.to_string(),
            Tensor {
                shape: p.value.shape().to_vec(),
                data: p.value.iter().copied().collect(),
            },
        );
    });
}

fn to_array(name: &str, t: &Tensor) -> Result<ArrayD<f32>> {
    ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.clone()).map_err(|e| Error::Integrity {
        tensor: name.to_string(),
        message: e.to_string(),
    })
}

/// Moves every parameter of `module` out of `tensors`.
fn take_params(prefix: &str, module: &mut dyn Parameterized<f32>, tensors: &mut BTreeMap<String, Tensor>) -> Result<()> {
    let mut err = None;
    module.visit_mut(prefix, &mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.remove(name) {
            None => {
                err = Some(Error::Integrity {
                    tensor: name.to_string(),
                    message: "missing from checkpoint".into(),
                })
            }
            Some(t) if t.shape != p.value.shape() => {
                err = Some(Error::Integrity {
                    tensor: name.to_string(),
                    message: format!("shape {:?}, model expects {:?}", t.shape, p.value.shape()),
                })
            }
            Some(t) => match to_array(name, &t) {
                Ok(a) => p.value = a,
                Err(e) => err = Some(e),
            },
        }
    });
    err.map_or(Ok(()), Err)
}

fn put_adam(key: &str, adam: &Adam<f32>, out: &mut BTreeMap<String, Tensor>) -> serde_json::Value {
    let mut steps = BTreeMap::new();
    for (name, slot) in &adam.slots {
        for (which, a) in [("m", &slot.m), ("v", &slot.v)] {
            out.insert(
                format!("{key}.{which}.{name}"),
                Tensor {
                    shape: a.shape().to_vec(),
                    data: a.iter().copied().collect(),
                },
            );
        }
        steps.insert(name.clone(), slot.step);
    }
    json!({ "config": adam.config, "steps": steps })
}

fn take_adam(key: &str, state: &serde_json::Value, tensors: &mut BTreeMap<String, Tensor>) -> Result<Adam<f32>> {
    #[derive(Deserialize)]
    struct Stored {
        config: AdamConfig,
        steps: BTreeMap<String, u64>,
    }
    let stored: Stored = serde_json::from_value(state.get(key).cloned().unwrap_or_default()).map_err(|e| state_err(key, e))?;
    let mut adam = Adam::new(stored.config);
    for (name, step) in stored.steps {
        let mut moment = |which: &str| -> Result<ArrayD<f32>> {
            let tname = format!("{key}.{which}.{name}");
            let t = tensors.remove(&tname).ok_or_else(|| Error::Integrity {
                tensor: tname.clone(),
                message: "missing from checkpoint".into(),
            })?;
            to_array(&tname, &t)
        };
        let (m, v) = (moment("m")?, moment("v")?);
        adam.slots.insert(name, AdamSlot { m, v, step });
    }
    Ok(adam)
}

fn state_err(field: &str, e: impl fmt::Display) -> Error {
    Error::Format {
        what: "checkpoint state",
        message: format!("{field}: {e}"),
    }
}

fn field<T: serde::de::DeserializeOwned>(state: &serde_json::Value, key: &str) -> Result<T> {
    serde_json::from_value(state.get(key).cloned().unwrap_or_default()).map_err(|e| state_err(key, e))
}

fn no_leftovers(tensors: BTreeMap<String, Tensor>) -> Result<()> {
    match tensors.into_keys().next() {
        None => Ok(()),
        Some(name) => Err(Error::Integrity {
            tensor: name,
            message: "not part of the model".into(),
        }),
    }
}

impl PipelineState {
    pub fn config(&self) -> &Config {
        match self {
            PipelineState::Autoencoder(s) => &s.trainer.config,
            PipelineState::Alae(s) => &s.run.config,
        }
    }

    pub fn schedule(&self) -> &StageSchedule {
        match self {
            PipelineState::Autoencoder(s) => &s.ae.schedule,
            PipelineState::Alae(s) => &s.model.ae.schedule,
        }
    }

    pub fn to_bundle(&self) -> CheckpointBundle {
        let mut tensors = BTreeMap::new();
        let (phase, state) = match self {
            PipelineState::Autoencoder(s) => {
                put_params("model", &s.ae, &mut tensors);
                let adam = put_adam("adam", &s.trainer.adam, &mut tensors);
                (Phase::Autoencoder, json!({ "progress": s.trainer.progress, "adam": adam }))
            }
            PipelineState::Alae(s) => {
                put_params("model", &s.model, &mut tensors);
                put_params("ema", &s.run.trainer.ema, &mut tensors);
                let t = &s.run.trainer;
                let opt_ed = put_adam("opt_ed", &t.opt_ed, &mut tensors);
                let opt_fg = put_adam("opt_fg", &t.opt_fg, &mut tensors);
                (
                    Phase::Alae,
                    json!({
                        "ae_history": s.ae_history,
                        "progress": s.run.progress,
                        "opt_ed": opt_ed,
                        "opt_fg": opt_fg,
                        "ema_decay": t.ema.decay,
                        "rng": t.rng,
                        "steps": t.steps,
                        "epochs_done": t.epochs_done,
                        "r1_probe": t.r1_probe,
                    }),
                )
            }
        };
        CheckpointBundle {
            phase,
            schedule: self.schedule().clone(),
            config: self.config().clone(),
            state,
            tensors,
        }
    }

    pub fn from_bundle(bundle: CheckpointBundle) -> Result<Self> {
        let CheckpointBundle {
            phase,
            schedule,
            config,
            state,
            mut tensors,
        } = bundle;
        if config.schedule()? != schedule {
            return Err(Error::Config("manifest schedule does not follow from its config".into()));
        }
        let mut ae = Autoencoder::new(schedule, 0);
        match phase {
            Phase::Autoencoder => {
                take_params("model", &mut ae, &mut tensors)?;
                let mut trainer = AeTrainer::new(&config)?;
                trainer.adam = take_adam("adam", &state, &mut tensors)?;
                trainer.progress = field(&state, "progress")?;
                no_leftovers(tensors)?;
                Ok(PipelineState::Autoencoder(AeState { ae, trainer }))
            }
            Phase::Alae => {
                let mut model = Alae::from_autoencoder(ae, config.alae.latent_dim, 0);
                take_params("model", &mut model, &mut tensors)?;
                let mut ema = EmaShadow::new(&model, field(&state, "ema_decay")?)?;
                take_params("ema", &mut ema, &mut tensors)?;
                let mut run = AlaeRun::new(&model, &config)?;
                run.progress = field(&state, "progress")?;
                let t = &mut run.trainer;
                t.ema = ema;
                t.opt_ed = take_adam("opt_ed", &state, &mut tensors)?;
                t.opt_fg = take_adam("opt_fg", &state, &mut tensors)?;
                t.rng = field::<ChaCha8Rng>(&state, "rng")?;
                t.steps = field(&state, "steps")?;
                t.epochs_done = field(&state, "epochs_done")?;
                t.r1_probe = field(&state, "r1_probe")?;
                no_leftovers(tensors)?;
                Ok(PipelineState::Alae(AlaeState {
                    model,
                    run,
                    ae_history: field(&state, "ae_history")?,
                }))
            }
        }
    }

    /// Saves atomically and returns the checkpoint hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        save_checkpoint(&self.to_bundle(), dir)
    }

    /// Loads a checkpoint and returns it with its hash.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let (bundle, hash) = load_checkpoint(dir)?;
        Ok((Self::from_bundle(bundle)?, hash))
    }
}
