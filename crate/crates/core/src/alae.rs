//! Phase 2: the trained autoencoder reconfigured as an adversarial latent
//! autoencoder.
//!
//! * `F` (mapping): 3 fully connected layers with leaky ReLU(0.2), `z -> w`.
//! * `E`: frozen conv encoder, flatten, one fully connected head to `w`.
//! * `G`: one fully connected head from `w` to the bottleneck block, then the
//!   frozen conv decoder.
//! * `D`: 3 fully connected layers with ReLU on `w`, one logit out.
//!
//! Each training step runs the discriminator update, the non-saturating
//! generator update and the latent reconstruction update in that order,
//! followed by an EMA update of `F` and the `G` head. The convolution stacks
//! never change.

use ndarray::{concatenate, s, Array2, Array4, ArrayD, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, TrainScope};
use crate::nn::{
    cast, scoped, zero_grads, Activation, Adam, AdamConfig, Linear, Mlp, Param, Parameterized, Real,
    LEAKY_SLOPE,
};
use crate::{Error, Result, LATENT_DIM};

macro_rules! latent_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
        pub struct $name(Vec<f32>);

        impl $name {
            pub fn new(values: Vec<f32>) -> Result<Self> {
                if values.len() != LATENT_DIM {
                    return Err(Error::shape(format!(
                        "{} must have {LATENT_DIM} values, got {}",
                        stringify!($name),
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{} contains non-finite values", stringify!($name))));
                }
                Ok($name(values))
            }

            pub fn as_slice(&self) -> &[f32] {
                &self.0
            }

            pub fn into_vec(self) -> Vec<f32> {
                self.0
            }

            pub fn stack(items: &[$name]) -> Array2<f32> {
                let mut out = Array2::zeros((items.len(), LATENT_DIM));
                for (i, it) in items.iter().enumerate() {
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(&it.0[..]));
                }
                out
            }

            pub fn unstack(a: &Array2<f32>) -> Result<Vec<$name>> {
                a.rows().into_iter().map(|r| $name::new(r.to_vec())).collect()
            }
        }

        impl TryFrom<Vec<f32>> for $name {
            type Error = Error;
            fn try_from(v: Vec<f32>) -> Result<Self> {
                $name::new(v)
            }
        }

        impl From<$name> for Vec<f32> {
            fn from(v: $name) -> Vec<f32> {
                v.0
            }
        }
    };
}

latent_newtype!(
    /// Standard-normal prior sample.
    LatentZ
);
latent_newtype!(
    /// Code in the learned latent space.
    LatentW
);

/// `n` i.i.d. standard-normal rows of width `dim`.
pub fn sample_normal<T: Real>(n: usize, dim: usize, rng: &mut impl rand::Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((n, dim), || {
        let v: f64 = StandardNormal.sample(rng);
        cast(v)
    })
}

/// Deterministic prior samples for a seed.
pub fn sample_z(n: usize, seed: u64) -> Result<Vec<LatentZ>> {
    if n < 1 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentZ::unstack(&sample_normal::<f32>(n, LATENT_DIM, &mut rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconSpace {
    /// `‖w − E(G(w))‖²`
    #[default]
    Latent,
    /// `‖x − G(E(x))‖²`
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlaeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    /// 0 disables the R1 penalty.
    pub r1_gamma: f64,
    pub recon_space: ReconSpace,
    /// Whether the reconstruction step also updates the `E` head.
    pub recon_updates_encoder: bool,
    pub latent_dim: usize,
}

impl Default for AlaeConfig {
    fn default() -> Self {
        AlaeConfig {
            epochs: 120,
            lr: 1e-4,
            batch_size: 8,
            ema_decay: 0.999,
            r1_gamma: 0.0,
            recon_space: ReconSpace::Latent,
            recon_updates_encoder: true,
            latent_dim: LATENT_DIM,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Alae<T> {
    /// Frozen Phase 1 network.
    pub ae: Autoencoder<T>,
    pub mapping: Mlp<T>,
    pub e_head: Linear<T>,
    pub g_head: Linear<T>,
    pub disc: Mlp<T>,
}

impl<T: Real> Alae<T> {
    pub fn from_autoencoder(ae: Autoencoder<T>, latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = ae.flat_features();
        let l = latent_dim;
        Alae {
            mapping: Mlp::new(&[l, l, l, l], Activation::LeakyRelu(LEAKY_SLOPE), &mut rng),
            e_head: Linear::new(flat, l, 1.0, &mut rng),
            g_head: Linear::new(l, flat, 1.0, &mut rng),
            disc: Mlp::new(&[l, l, l, 1], Activation::Relu, &mut rng),
            ae,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.e_head.outputs()
    }

    fn bottleneck_dims(&self) -> (usize, usize) {
        self.ae.schedule.bottleneck()
    }

    fn unflatten(&self, flat: Array2<T>) -> Array4<T> {
        let (r, c) = self.bottleneck_dims();
        let n = flat.nrows();
        flat.as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, r, r, c))
            .expect("bottleneck reshape")
    }

    fn check_latent(&self, w: &Array2<T>) -> Result<()> {
        if w.ncols() != self.latent_dim() {
            return Err(Error::shape(format!(
                "latent codes must have {} columns, got {}",
                self.latent_dim(),
                w.ncols()
            )));
        }
        Ok(())
    }

    pub fn map_f(&self, z: &Array2<T>) -> Result<Array2<T>> {
        self.check_latent(z)?;
        self.mapping.infer(z)
    }

    pub fn encode_e(&self, x: &Array4<T>) -> Result<Array2<T>> {
        let t = self.ae.encode_to_stage(x, self.ae.stages())?;
        self.e_head.infer(&flatten(t))
    }

    pub fn generate_g(&self, w: &Array2<T>) -> Result<Array4<T>> {
        self.check_latent(w)?;
        let t = self.unflatten(self.g_head.infer(w)?);
        self.ae.decode_from_stage(&t, self.ae.stages())
    }

    /// One unbounded logit per row.
    pub fn discriminate(&self, w: &Array2<T>) -> Result<Array2<T>> {
        self.check_latent(w)?;
        self.disc.infer(w)
    }

    pub fn reconstruct(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.generate_g(&self.encode_e(x)?)
    }

    /// Copy whose `F` and `G` head are the EMA shadow weights.
    pub fn with_ema(&self, ema: &EmaShadow<T>) -> Self {
        let mut m = self.clone();
        m.mapping = ema.mapping.clone();
        m.g_head = ema.g_head.clone();
        m
    }

    /// Checksum of the frozen convolution stacks.
    pub fn frozen_checksum(&self) -> String {
        crate::nn::checksum(&self.ae)
    }
}

impl<T: Real> Parameterized<T> for Alae<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.ae.visit(&scoped(prefix, "ae"), f);
        self.mapping.visit(&scoped(prefix, "mapping"), f);
        self.e_head.visit(&scoped(prefix, "e_head"), f);
        self.g_head.visit(&scoped(prefix, "g_head"), f);
        self.disc.visit(&scoped(prefix, "disc"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.ae.visit_mut(&scoped(prefix, "ae"), f);
        self.mapping.visit_mut(&scoped(prefix, "mapping"), f);
        self.e_head.visit_mut(&scoped(prefix, "e_head"), f);
        self.g_head.visit_mut(&scoped(prefix, "g_head"), f);
        self.disc.visit_mut(&scoped(prefix, "disc"), f);
    }
}

impl<T: Real> Autoencoder<T> {
    /// Length of the flattened bottleneck block.
    pub fn flat_features(&self) -> usize {
        let (r, c) = self.schedule.bottleneck();
        r * r * c
    }
}

fn flatten<T: Real>(t: Array4<T>) -> Array2<T> {
    let (n, h, w, c) = t.dim();
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, h * w * c))
        .expect("flatten")
}

/// Named subset of the trainable heads, for optimizer steps.
struct Group<'a, T> {
    parts: Vec<(&'static str, &'a mut dyn Parameterized<T>)>,
}

impl<T: Real> Parameterized<T> for Group<'_, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (name, p) in &self.parts {
            p.visit(&scoped(prefix, name), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (name, p) in &mut self.parts {
            p.visit_mut(&scoped(prefix, name), f);
        }
    }
}

// ---------------------------------------------------------------------------
// losses

/// `ln(1 + eˣ)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(−real) + softplus(fake)`
pub fn loss_discriminator(logit_real: f64, logit_fake: f64) -> f64 {
    softplus(-logit_real) + softplus(logit_fake)
}

/// Non-saturating generator loss `softplus(−fake)`.
pub fn loss_generator(logit_fake: f64) -> f64 {
    softplus(-logit_fake)
}

/// `mean((w − w_cycle)²)`
pub fn loss_latent_recon(w: &[f64], w_cycle: &[f64]) -> Result<f64> {
    if w.len() != w_cycle.len() || w.is_empty() {
        return Err(Error::shape(format!("latent lengths {} vs {}", w.len(), w_cycle.len())));
    }
    Ok(w.iter().zip(w_cycle).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / w.len() as f64)
}

/// Batch discriminator loss (mean over rows) and its gradients with respect
/// to both logit columns.
pub fn discriminator_loss_grad<T: Real>(real: &Array2<T>, fake: &Array2<T>) -> (f64, Array2<T>, Array2<T>) {
    let nr = real.len() as f64;
    let nf = fake.len() as f64;
    let f64_of = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let loss = real.iter().map(|&r| softplus(-f64_of(r))).sum::<f64>() / nr
        + fake.iter().map(|&f| softplus(f64_of(f))).sum::<f64>() / nf;
    let d_real = real.mapv(|r| cast(-sigmoid(-f64_of(r)) / nr));
    let d_fake = fake.mapv(|f| cast(sigmoid(f64_of(f)) / nf));
    (loss, d_real, d_fake)
}

pub fn generator_loss_grad<T: Real>(fake: &Array2<T>) -> (f64, Array2<T>) {
    let n = fake.len() as f64;
    let f64_of = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let loss = fake.iter().map(|&f| softplus(-f64_of(f))).sum::<f64>() / n;
    (loss, fake.mapv(|f| cast(-sigmoid(-f64_of(f)) / n)))
}

/// Mean squared error and its gradient with respect to `approx`.
pub fn mse_loss_grad<T: Real, D: ndarray::Dimension>(
    target: &ndarray::Array<T, D>,
    approx: &ndarray::Array<T, D>,
) -> (f64, ndarray::Array<T, D>) {
    let n = target.len() as f64;
    let mut loss = 0.0;
    let scale: T = cast(2.0 / n);
    let mut grad = approx.clone();
    Zip::from(&mut grad).and(target).for_each(|g, &t| {
        let d = *g - t;
        loss += d.to_f64().unwrap_or(f64::NAN).powi(2);
        *g = d * scale;
    });
    (loss / n, grad)
}

// ---------------------------------------------------------------------------
// EMA

/// Shadow copies of the mapping network and the generator head.
#[derive(Clone, Debug)]
pub struct EmaShadow<T> {
    pub decay: f64,
    pub mapping: Mlp<T>,
    pub g_head: Linear<T>,
}

impl<T: Real> EmaShadow<T> {
    pub fn new(model: &Alae<T>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(EmaShadow {
            decay,
            mapping: model.mapping.clone(),
            g_head: model.g_head.clone(),
        })
    }

    pub fn update(&mut self, model: &Alae<T>) {
        ema_update(&mut self.mapping, &model.mapping, self.decay);
        ema_update(&mut self.g_head, &model.g_head, self.decay);
    }
}

impl<T: Real> Parameterized<T> for EmaShadow<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.mapping.visit(&scoped(prefix, "mapping"), f);
        self.g_head.visit(&scoped(prefix, "g_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.mapping.visit_mut(&scoped(prefix, "mapping"), f);
        self.g_head.visit_mut(&scoped(prefix, "g_head"), f);
    }
}

/// `shadow ← decay·shadow + (1 − decay)·live`, matched by parameter name.
pub fn ema_update<T: Real>(
    shadow: &mut (impl Parameterized<T> + ?Sized),
    live: &(impl Parameterized<T> + ?Sized),
    decay: f64,
) {
    let mut values = std::collections::HashMap::new();
    live.visit("", &mut |name, p| {
        values.insert(name.to_string(), p.value.clone());
    });
    let d: T = cast(decay);
    let keep: T = cast(1.0 - decay);
    shadow.visit_mut("", &mut |name, p| {
        if let Some(v) = values.get(name) {
            Zip::from(&mut p.value).and(v).for_each(|s, &l| *s = d * *s + keep * l);
        }
    });
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub discriminator: f64,
    pub generator: f64,
    pub reconstruction: f64,
    pub r1: f64,
}

/// Optimizers, EMA shadow and RNG for Phase 2.
#[derive(Clone, Debug)]
pub struct AlaeTrainer<T> {
    pub config: AlaeConfig,
    /// Discriminator and `E` head.
    pub opt_ed: Adam<T>,
    /// Mapping network and `G` head.
    pub opt_fg: Adam<T>,
    pub ema: EmaShadow<T>,
    pub rng: ChaCha8Rng,
    pub steps: u64,
    pub epochs_done: usize,
    /// Pixel-space length of the finite-difference probe used by R1.
    pub r1_probe: f64,
}

impl<T: Real> AlaeTrainer<T> {
    pub fn new(model: &Alae<T>, config: AlaeConfig, seed: u64) -> Result<Self> {
        let adam = AdamConfig::adversarial(config.lr);
        Ok(AlaeTrainer {
            ema: EmaShadow::new(model, config.ema_decay)?,
            opt_ed: Adam::new(adam),
            opt_fg: Adam::new(adam),
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
            epochs_done: 0,
            r1_probe: 1e-2,
            config,
        })
    }

    /// Sets every learning rate (used by tests and schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.opt_ed.config.lr = lr;
        self.opt_fg.config.lr = lr;
    }

    /// Draws `z` from the trainer RNG and runs [`Self::train_step`].
    pub fn step(&mut self, model: &mut Alae<T>, x_real: &Array4<T>) -> Result<StepLosses> {
        let z = sample_normal(x_real.dim().0, model.latent_dim(), &mut self.rng);
        self.train_step(model, x_real, &z)
    }

    pub fn train_step(&mut self, model: &mut Alae<T>, x_real: &Array4<T>, z: &Array2<T>) -> Result<StepLosses> {
        if x_real.dim().0 != z.nrows() {
            return Err(Error::shape(format!(
                "batch sizes differ: {} images vs {} latent samples",
                x_real.dim().0,
                z.nrows()
            )));
        }
        model.check_latent(z)?;
        let mut losses = StepLosses::default();
        (losses.discriminator, losses.r1) = self.discriminator_step(model, x_real, z)?;
        losses.generator = self.generator_step(model, z)?;
        losses.reconstruction = match self.config.recon_space {
            ReconSpace::Latent => self.latent_recon_step(model, z)?,
            ReconSpace::Image => self.image_recon_step(model, x_real)?,
        };
        self.ema.update(model);
        self.steps += 1;
        Ok(losses)
    }

    fn discriminator_step(&mut self, model: &mut Alae<T>, x_real: &Array4<T>, z: &Array2<T>) -> Result<(f64, f64)> {
        zero_grads(model);
        let loss = discriminator_grads(model, x_real, z)?;
        let r1 = if self.config.r1_gamma > 0.0 {
            r1_penalty_grads(model, x_real, self.config.r1_gamma, self.r1_probe)?
        } else {
            0.0
        };
        self.opt_ed.step(
            &mut Group {
                parts: vec![("e_head", &mut model.e_head), ("disc", &mut model.disc)],
            },
            "",
        );
        Ok((loss, r1))
    }

    fn generator_step(&mut self, model: &mut Alae<T>, z: &Array2<T>) -> Result<f64> {
        zero_grads(model);
        let loss = generator_grads(model, z)?;
        self.opt_fg.step(
            &mut Group {
                parts: vec![("mapping", &mut model.mapping), ("g_head", &mut model.g_head)],
            },
            "",
        );
        Ok(loss)
    }

    fn latent_recon_step(&mut self, model: &mut Alae<T>, z: &Array2<T>) -> Result<f64> {
        zero_grads(model);
        let w = model.mapping.infer(z)?;
        let loss = latent_recon_grads(model, &w, self.config.recon_updates_encoder)?;
        self.step_recon_heads(model);
        Ok(loss)
    }

    fn image_recon_step(&mut self, model: &mut Alae<T>, x_real: &Array4<T>) -> Result<f64> {
        zero_grads(model);
        let loss = image_recon_grads(model, x_real, self.config.recon_updates_encoder)?;
        self.step_recon_heads(model);
        Ok(loss)
    }

    fn step_recon_heads(&mut self, model: &mut Alae<T>) {
        self.opt_fg.step(
            &mut Group {
                parts: vec![("g_head", &mut model.g_head)],
            },
            "",
        );
        if self.config.recon_updates_encoder {
            self.opt_ed.step(
                &mut Group {
                    parts: vec![("e_head", &mut model.e_head)],
                },
                "",
            );
        }
    }
}

/// Discriminator loss on real images and `G(F(z))`; accumulates gradients
/// in the `E` head and the discriminator.
pub fn discriminator_grads<T: Real>(model: &mut Alae<T>, x_real: &Array4<T>, z: &Array2<T>) -> Result<f64> {
    let b = x_real.dim().0;
    let x_fake = model.generate_g(&model.mapping.infer(z)?)?;
    let k = model.ae.stages();
    let real = flatten(model.ae.encode_to_stage(x_real, k)?);
    let fake = flatten(model.ae.encode_to_stage(&x_fake, k)?);
    let feats = concatenate(Axis(0), &[real.view(), fake.view()]).expect("same widths");
    let (w, e_cache) = model.e_head.forward(&feats)?;
    let (logits, d_cache) = model.disc.forward(&w)?;
    let real = logits.slice(s![..b, ..]).to_owned();
    let fake = logits.slice(s![b.., ..]).to_owned();
    let (loss, d_real, d_fake) = discriminator_loss_grad(&real, &fake);
    let dlogits = concatenate(Axis(0), &[d_real.view(), d_fake.view()]).expect("same widths");
    let dw = model.disc.backward(&d_cache, &dlogits, true);
    model.e_head.backward(&e_cache, &dw, true);
    Ok(loss)
}

/// Generator loss on `D(E(G(F(z))))`; accumulates gradients only in `F`
/// and the `G` head.
pub fn generator_grads<T: Real>(model: &mut Alae<T>, z: &Array2<T>) -> Result<f64> {
    let k = model.ae.stages();
    let (w, f_cache) = model.mapping.forward(z)?;
    let (g, g_cache) = model.g_head.forward(&w)?;
    let t = model.unflatten(g);
    let (x_fake, dec) = model.ae.decode_train(&t, k, TrainScope::None)?;
    let (feat, enc) = model.ae.encode_train(&x_fake, k, TrainScope::None)?;
    let (w2, e_cache) = model.e_head.forward(&flatten(feat))?;
    let (logits, d_cache) = model.disc.forward(&w2)?;
    let (loss, dlogits) = generator_loss_grad(&logits);
    let dw2 = model.disc.backward(&d_cache, &dlogits, false);
    let dfeat = model.e_head.backward(&e_cache, &dw2, false);
    let dfeat = model.unflatten(dfeat);
    let dx = model.ae.encode_backward(&enc, &dfeat, TrainScope::None, 0);
    let dt = model.ae.decode_backward(&dec, &dx, TrainScope::None);
    let dw = model.g_head.backward(&g_cache, &flatten(dt), true);
    model.mapping.backward(&f_cache, &dw, true);
    Ok(loss)
}

/// `mean((w − E(G(w)))²)` with gradients accumulated in the `G` head and,
/// when `update_encoder`, the `E` head. `w` itself is held fixed.
pub fn latent_recon_grads<T: Real>(model: &mut Alae<T>, w: &Array2<T>, update_encoder: bool) -> Result<f64> {
    let k = model.ae.stages();
    let (g, g_cache) = model.g_head.forward(w)?;
    let t = model.unflatten(g);
    let (x, dec) = model.ae.decode_train(&t, k, TrainScope::None)?;
    let (feat, enc) = model.ae.encode_train(&x, k, TrainScope::None)?;
    let (w_cycle, e_cache) = model.e_head.forward(&flatten(feat))?;
    let (loss, dwc) = mse_loss_grad(w, &w_cycle);
    let dfeat = model.e_head.backward(&e_cache, &dwc, update_encoder);
    let dfeat = model.unflatten(dfeat);
    let dx = model.ae.encode_backward(&enc, &dfeat, TrainScope::None, 0);
    let dt = model.ae.decode_backward(&dec, &dx, TrainScope::None);
    model.g_head.backward(&g_cache, &flatten(dt), true);
    Ok(loss)
}

/// `mean((x − G(E(x)))²)`; accumulates gradients in the `G` head and, when
/// `update_encoder`, the `E` head.
pub fn image_recon_grads<T: Real>(model: &mut Alae<T>, x: &Array4<T>, update_encoder: bool) -> Result<f64> {
    let k = model.ae.stages();
    let feats = flatten(model.ae.encode_to_stage(x, k)?);
    let (w, e_cache) = model.e_head.forward(&feats)?;
    let (g, g_cache) = model.g_head.forward(&w)?;
    let t = model.unflatten(g);
    let (x_rec, dec) = model.ae.decode_train(&t, k, TrainScope::None)?;
    let (loss, dx) = mse_loss_grad(x, &x_rec);
    let dt = model.ae.decode_backward(&dec, &dx, TrainScope::None);
    let dw = model.g_head.backward(&g_cache, &flatten(dt), true);
    model.e_head.backward(&e_cache, &dw, update_encoder);
    Ok(loss)
}

/// Gradient of `Σᵢ D(E(xᵢ))` with respect to the images.
pub fn disc_input_gradient<T: Real>(model: &mut Alae<T>, x: &Array4<T>) -> Result<Array4<T>> {
    let k = model.ae.stages();
    let (feat, enc) = model.ae.encode_train(x, k, TrainScope::None)?;
    let (w, e_cache) = model.e_head.forward(&flatten(feat))?;
    let (logits, d_cache) = model.disc.forward(&w)?;
    let ones = Array2::from_elem(logits.raw_dim(), T::one());
    let dw = model.disc.backward(&d_cache, &ones, false);
    let dfeat = model.e_head.backward(&e_cache, &dw, false);
    let dfeat = model.unflatten(dfeat);
    Ok(model.ae.encode_backward(&enc, &dfeat, TrainScope::None, 0))
}

/// R1 penalty `γ/2 · mean ‖∇ₓ D(E(x))‖²` on real images.
pub fn r1_penalty<T: Real>(model: &mut Alae<T>, x: &Array4<T>, gamma: f64) -> Result<f64> {
    let g = disc_input_gradient(model, x)?;
    let sq: f64 = g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum();
    Ok(0.5 * gamma * sq / x.dim().0 as f64)
}

/// Adds the R1 parameter gradient to the `E` head and discriminator grads.
/// The required mixed second derivative is taken as a central difference of
/// parameter gradients along the input gradient direction.
pub fn r1_penalty_grads<T: Real>(model: &mut Alae<T>, x: &Array4<T>, gamma: f64, probe: f64) -> Result<f64> {
    let g = disc_input_gradient(model, x)?;
    let b = x.dim().0 as f64;
    let sq: f64 = g.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum();
    let penalty = 0.5 * gamma * sq / b;
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.to_f64().unwrap_or(0.0).abs()));
    if gmax == 0.0 {
        return Ok(penalty);
    }
    let eps = probe / gmax;
    let saved = head_grads(model);
    let mut probe_grads = |sign: f64| -> Result<Vec<ArrayD<T>>> {
        zero_head_grads(model);
        let xp = x + &g.mapv(|v| v * cast(sign * eps));
        let k = model.ae.stages();
        let feats = flatten(model.ae.encode_to_stage(&xp, k)?);
        let (w, e_cache) = model.e_head.forward(&feats)?;
        let (logits, d_cache) = model.disc.forward(&w)?;
        let ones = Array2::from_elem(logits.raw_dim(), T::one());
        let dw = model.disc.backward(&d_cache, &ones, true);
        model.e_head.backward(&e_cache, &dw, true);
        Ok(head_grads(model))
    };
    let plus = probe_grads(1.0)?;
    let minus = probe_grads(-1.0)?;
    let scale: T = cast(gamma / (b * 2.0 * eps));
    let mut i = 0;
    let mut restore = |_: &str, p: &mut Param<T>| {
        p.grad.assign(&(&saved[i] + &((&plus[i] - &minus[i]) * scale)));
        i += 1;
    };
    model.e_head.visit_mut("", &mut restore);
    model.disc.visit_mut("", &mut restore);
    Ok(penalty)
}

fn head_grads<T: Real>(model: &Alae<T>) -> Vec<ArrayD<T>> {
    let mut out = Vec::new();
    model.e_head.visit("", &mut |_, p| out.push(p.grad.clone()));
    model.disc.visit("", &mut |_, p| out.push(p.grad.clone()));
    out
}

fn zero_head_grads<T: Real>(model: &mut Alae<T>) {
    zero_grads(&mut model.e_head);
    zero_grads(&mut model.disc);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::StageSchedule;

    fn toy(latent: usize) -> Alae<f64> {
        let ae = Autoencoder::new(StageSchedule::custom(16, 2, &[3]).unwrap(), 4);
        Alae::from_autoencoder(ae, latent, 9)
    }

    #[test]
    fn loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((loss_discriminator(0.0, 0.0) - 2.0 * ln2).abs() < 1e-12);
        assert!((loss_generator(0.0) - ln2).abs() < 1e-12);
        assert!(loss_discriminator(1e3, -1e3) < 1e-300);
        assert!(loss_generator(1e3) < 1e-300);
        assert!((loss_discriminator(1.0, -1.0) - 0.626_523_4).abs() < 1e-6);
        assert_eq!(loss_latent_recon(&[1.0; 4], &[1.0; 4]).unwrap(), 0.0);
        assert_eq!(loss_latent_recon(&[1.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert!(loss_latent_recon(&[1.0; 4], &[0.0; 3]).is_err());
    }

    #[test]
    fn latent_newtypes_check_dimension() {
        assert!(LatentW::new(vec![0.0; LATENT_DIM]).is_ok());
        assert!(LatentW::new(vec![0.0; 3]).is_err());
        assert!(LatentZ::new(vec![f32::NAN; LATENT_DIM]).is_err());
        let parsed: std::result::Result<LatentW, _> = serde_json::from_str("[1.0, 2.0]");
        assert!(parsed.is_err());
    }

    #[test]
    fn sample_z_is_seeded() {
        let a = sample_z(3, 5).unwrap();
        assert_eq!(a, sample_z(3, 5).unwrap());
        assert_ne!(a, sample_z(3, 6).unwrap());
        assert_eq!(a[0].as_slice().len(), 512);
        assert!(sample_z(0, 1).is_err());
    }

    #[test]
    fn zero_networks_give_zero_outputs() {
        let mapping = Mlp::<f64>::zeros(&[4, 4, 4, 4], Activation::LeakyRelu(0.2));
        assert!(mapping.infer(&Array2::ones((2, 4))).unwrap().iter().all(|&v| v == 0.0));
        let disc = Mlp::<f64>::zeros(&[4, 4, 4, 1], Activation::Relu);
        let out = disc.infer(&Array2::ones((3, 4))).unwrap();
        assert_eq!(out.dim(), (3, 1));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inference_shapes_and_bounds() {
        let m = toy(6);
        let x = Array4::from_shape_fn((2, 16, 16, 3), |(b, y, x, c)| ((b * 7 + y * 3 + x + c) as f64 * 0.37).sin());
        let w = m.encode_e(&x).unwrap();
        assert_eq!(w.dim(), (2, 6));
        assert_eq!(w, m.encode_e(&x).unwrap());
        let img = m.generate_g(&w).unwrap();
        assert_eq!(img.dim(), (2, 16, 16, 3));
        assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(m.discriminate(&w).unwrap().dim(), (2, 1));
        assert!(m.generate_g(&Array2::zeros((1, 5))).is_err());
        assert!(m.encode_e(&Array4::zeros((1, 8, 8, 3))).is_err());
    }

    #[test]
    fn ema_examples() {
        let live = Linear::<f64>::new(3, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut shadow = Linear::<f64>::zeros(3, 2);
        ema_update(&mut shadow, &live, 0.0);
        assert_eq!(shadow.weight.value, live.weight.value);
        let before = shadow.clone();
        let other = Linear::<f64>::zeros(3, 2);
        ema_update(&mut shadow, &other, 1.0);
        assert_eq!(shadow.weight.value, before.weight.value);
    }

    #[test]
    fn mismatched_batches_rejected() {
        let mut m = toy(4);
        let mut tr = AlaeTrainer::new(&m, AlaeConfig::default(), 0).unwrap();
        let x = Array4::zeros((2, 16, 16, 3));
        assert!(tr.train_step(&mut m, &x, &Array2::zeros((3, 4))).is_err());
    }
}
