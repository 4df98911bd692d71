use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix1, IxDyn};

use super::{normal_array, scoped, Activation, Param, Parameterized, Real};
use crate::{Error, Result};

/// Fully connected layer `y = x W + b`, weight layout `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

pub type LinearCache<T> = Array2<T>;

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, gain: f64, rng: &mut impl rand::Rng) -> Self {
        let std = gain / (inputs as f64).sqrt();
        Linear {
            weight: Param::new(normal_array(&[inputs, outputs], std, rng)),
            bias: Param::new(ArrayD::zeros(IxDyn(&[outputs]))),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Param::new(ArrayD::zeros(IxDyn(&[inputs, outputs]))),
            bias: Param::new(ArrayD::zeros(IxDyn(&[outputs]))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality().expect("2-d weight")
    }

    pub fn infer(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.inputs() {
            return Err(Error::shape(format!(
                "linear expects {} features, got {}",
                self.inputs(),
                x.ncols()
            )));
        }
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        Ok(x.dot(&self.w()) + b)
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<(Array2<T>, LinearCache<T>)> {
        Ok((self.infer(x)?, x.clone()))
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, dy: &Array2<T>, param_grads: bool) -> Array2<T> {
        if param_grads {
            let dw = cache.t().dot(dy);
            self.weight.grad += &dw.into_dyn();
            self.bias.grad += &dy.sum_axis(Axis(0)).into_dyn();
        }
        dy.dot(&self.w().t())
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&scoped(prefix, "weight"), &self.weight);
        f(&scoped(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        f(&scoped(prefix, "bias"), &mut self.bias);
    }
}

/// Stack of linear layers with an activation between consecutive layers and
/// none after the last one.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    inputs: Vec<LinearCache<T>>,
    activated: Vec<Array2<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new(widths: &[usize], activation: Activation, rng: &mut impl rand::Rng) -> Self {
        let gain = match activation {
            Activation::LeakyRelu(s) => (2.0 / (1.0 + s * s)).sqrt(),
            Activation::Relu => 2f64.sqrt(),
        };
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], gain, rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        Mlp {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            activation,
        }
    }

    pub fn infer(&self, x: &Array2<T>) -> Result<Array2<T>> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(&h)?;
            if i < last {
                h = self.activation.apply(&h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<(Array2<T>, MlpCache<T>)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            activated: Vec::new(),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, c) = layer.forward(&h)?;
            cache.inputs.push(c);
            h = y;
            if i < last {
                h = self.activation.apply(&h);
                cache.activated.push(h.clone());
            }
        }
        Ok((h, cache))
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &Array2<T>, param_grads: bool) -> Array2<T> {
        let mut g = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                g = self.activation.backward(&cache.activated[i], &g);
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, param_grads);
        }
        g
    }
}

impl<T: Real> Parameterized<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&scoped(prefix, &format!("fc{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&scoped(prefix, &format!("fc{i}")), f);
        }
    }
}
