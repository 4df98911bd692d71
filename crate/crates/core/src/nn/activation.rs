use ndarray::{Array, Dimension, Zip};

use super::{cast, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
}

impl Activation {
    pub fn apply<T: Real, D: Dimension>(&self, x: &Array<T, D>) -> Array<T, D> {
        match *self {
            Activation::LeakyRelu(slope) => leaky_relu(x, slope),
            Activation::Relu => relu(x),
        }
    }

    /// Backward pass expressed in terms of the activation output `y`.
    pub fn backward<T: Real, D: Dimension>(&self, y: &Array<T, D>, dy: &Array<T, D>) -> Array<T, D> {
        match *self {
            Activation::LeakyRelu(slope) => leaky_relu_backward(y, dy, slope),
            Activation::Relu => relu_backward(y, dy),
        }
    }
}

pub fn leaky_relu<T: Real, D: Dimension>(x: &Array<T, D>, slope: f64) -> Array<T, D> {
    let s: T = cast(slope);
    x.mapv(|v| if v > T::zero() { v } else { v * s })
}

/// `y` is the activation output; for a positive slope its sign matches the
/// input sign.
pub fn leaky_relu_backward<T: Real, D: Dimension>(y: &Array<T, D>, dy: &Array<T, D>, slope: f64) -> Array<T, D> {
    let s: T = cast(slope);
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|g, &v| {
        if v <= T::zero() {
            *g *= s;
        }
    });
    dx
}

pub fn relu<T: Real, D: Dimension>(x: &Array<T, D>) -> Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real, D: Dimension>(y: &Array<T, D>, dy: &Array<T, D>) -> Array<T, D> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|g, &v| {
        if v <= T::zero() {
            *g = T::zero();
        }
    });
    dx
}

pub fn tanh<T: Real, D: Dimension>(x: &Array<T, D>) -> Array<T, D> {
    x.mapv(|v| v.tanh())
}

pub fn tanh_backward<T: Real, D: Dimension>(y: &Array<T, D>, dy: &Array<T, D>) -> Array<T, D> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|g, &v| *g *= T::one() - v * v );
    dx
}
