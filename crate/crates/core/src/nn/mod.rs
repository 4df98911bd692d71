//! Minimal NHWC tensor layers with hand-written backward passes.
//!
//! Every layer follows the same protocol: `forward` returns the output plus
//! a cache, `backward` consumes that cache and the upstream gradient,
//! accumulates parameter gradients into [`Param::grad`] and returns the
//! gradient with respect to the layer input. `infer` is the cache-free,
//! non-mutating path used by concurrent inference.

mod activation;
mod conv;
mod linear;
mod norm;
mod optim;
mod resample;
mod residual;

pub use activation::{leaky_relu, leaky_relu_backward, relu, relu_backward, tanh, tanh_backward, Activation};
pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearCache, Mlp, MlpCache};
pub use norm::{BatchNorm2d, NormCache};
pub use optim::{Adam, AdamConfig, AdamSlot};
pub use resample::{avg_pool2, avg_pool2_backward, upsample2, upsample2_backward};
pub use residual::{ResidualBlock, ResidualCache};

use ndarray::{ArrayD, NdFloat};
use num_traits::FromPrimitive;
use sha2::{Digest, Sha256};

/// Slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Floating point element type of all layers (`f32` for training, `f64` for
/// gradient checks).
pub trait Real: NdFloat + FromPrimitive + Default {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn cast<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable float")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics are updated.
    Train,
    /// Running statistics, nothing is mutated.
    Infer,
}

/// A named tensor. Buffers (running statistics) are params with
/// `trainable == false`; optimizers skip them.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Param {
            grad: ArrayD::zeros(ndarray::IxDyn(&[0])),
            value,
            trainable: false,
        }
    }

    pub fn zero_grad(&mut self) {
        if self.trainable {
            self.grad.fill(T::zero());
        }
    }
}

/// Anything holding named parameters.
pub trait Parameterized<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads<T: Real>(module: &mut (impl Parameterized<T> + ?Sized)) {
    module.visit_mut("", &mut |_, p| p.zero_grad());
}

pub fn param_count<T: Real>(module: &(impl Parameterized<T> + ?Sized)) -> usize {
    let mut n = 0;
    module.visit("", &mut |_, p| n += p.value.len());
    n
}

/// SHA-256 over parameter names and exact values, buffers included.
pub fn checksum<T: Real>(module: &(impl Parameterized<T> + ?Sized)) -> String {
    let mut hasher = Sha256::new();
    module.visit("", &mut |name, p| {
        hasher.update(name.as_bytes());
        for v in p.value.iter() {
            hasher.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
        }
    });
    hex::encode(hasher.finalize())
}

/// Copies values of every parameter in `src` onto the same-named parameter
/// of `dst`. Names missing from `dst` are ignored.
pub fn copy_values<T: Real>(
    src: &(impl Parameterized<T> + ?Sized),
    dst: &mut (impl Parameterized<T> + ?Sized),
) {
    let mut values = std::collections::HashMap::new();
    src.visit("", &mut |name, p| {
        values.insert(name.to_string(), p.value.clone());
    });
    dst.visit_mut("", &mut |name, p| {
        if let Some(v) = values.get(name) {
            p.value.assign(v);
        }
    });
}

pub(crate) fn normal_array<T: Real>(
    shape: &[usize],
    std: f64,
    rng: &mut impl rand::Rng,
) -> ArrayD<T> {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            cast(v * std)
        })
        .collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape matches data")
}
