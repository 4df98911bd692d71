use ndarray::{Array1, Array2, Array4, ArrayD, Ix1, IxDyn};

use super::{cast, scoped, Mode, Param, Parameterized, Real};
use crate::{Error, Result};

/// Batch normalisation over `(batch, h, w)` per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    mode: Mode,
    xhat: Array2<T>,
    inv_std: Array1<T>,
    dim: (usize, usize, usize, usize),
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn flat(&self, x: &Array4<T>) -> Result<Array2<T>> {
        let (n, h, w, c) = x.dim();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels()
            )));
        }
        Ok(x.as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * h * w, c))
            .expect("flatten"))
    }

    fn vec(p: &Param<T>) -> ndarray::ArrayView1<'_, T> {
        p.value.view().into_dimensionality::<Ix1>().expect("1-d")
    }

    /// Per-channel mean and biased variance of `(m, c)` rows.
    fn moments(x: &[T], c: usize) -> (Array1<T>, Array1<T>) {
        let m = x.len() / c;
        let mut mean = vec![T::zero(); c];
        for row in x.chunks_exact(c) {
            for (a, &v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        let mf: T = cast(m as f64);
        mean.iter_mut().for_each(|a| *a /= mf);
        let mut var = vec![T::zero(); c];
        for row in x.chunks_exact(c) {
            for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|a| *a /= mf);
        (Array1::from(mean), Array1::from(var))
    }

    fn normalise(&self, x: &Array2<T>, mode: Mode) -> (Array2<T>, Array1<T>, Option<(Array1<T>, Array1<T>)>) {
        let eps: T = cast(self.eps);
        let c = x.ncols();
        let src = x.as_slice().expect("standard layout");
        let (mean, inv_std, stats) = match mode {
            Mode::Train => {
                let (mean, var) = Self::moments(src, c);
                let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
                (mean.clone(), inv_std, Some((mean, var)))
            }
            Mode::Infer => (
                Self::vec(&self.running_mean).to_owned(),
                Self::vec(&self.running_var).mapv(|v| T::one() / (v + eps).sqrt()),
                None,
            ),
        };
        let mut xhat = Vec::with_capacity(src.len());
        for row in src.chunks_exact(c) {
            xhat.extend(row.iter().zip(&mean).zip(&inv_std).map(|((&v, &mu), &s)| (v - mu) * s));
        }
        (Array2::from_shape_vec(x.dim(), xhat).expect("xhat shape"), inv_std, stats)
    }

    fn affine(&self, xhat: &Array2<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
        let (gamma, beta) = (Self::vec(&self.gamma), Self::vec(&self.beta));
        let (g, b) = (gamma.as_slice().expect("contiguous"), beta.as_slice().expect("contiguous"));
        let y: Vec<T> = xhat
            .as_slice()
            .expect("standard layout")
            .chunks_exact(dim.3)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&v, &g), &b)| v * g + b))
            .collect();
        Array4::from_shape_vec(dim, y).expect("unflatten")
    }

    /// In train mode the running statistics move towards the batch
    /// statistics (unbiased variance); in infer mode nothing is mutated.
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, NormCache<T>)> {
        let flat = self.flat(x)?;
        let (xhat, inv_std, stats) = self.normalise(&flat, mode);
        if let Some((mean, var)) = stats {
            let m = flat.nrows() as f64;
            let mom: T = cast(self.momentum);
            let keep = T::one() - mom;
            let unbias: T = cast(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            self.running_mean.value = (&self.running_mean.value * keep) + &(mean * mom).into_dyn();
            self.running_var.value = (&self.running_var.value * keep) + &(var * unbias * mom).into_dyn();
        }
        let y = self.affine(&xhat, x.dim());
        Ok((
            y,
            NormCache {
                mode,
                xhat,
                inv_std,
                dim: x.dim(),
            },
        ))
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let flat = self.flat(x)?;
        let (xhat, _, _) = self.normalise(&flat, Mode::Infer);
        Ok(self.affine(&xhat, x.dim()))
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Array4<T>, param_grads: bool) -> Array4<T> {
        let (n, h, w, c) = cache.dim;
        let m = n * h * w;
        let dy = dy.as_standard_layout();
        let dy = dy.as_slice().expect("standard layout");
        let xhat = cache.xhat.as_slice().expect("standard layout");
        // per-channel sums of dy and dy * xhat
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dyx = vec![T::zero(); c];
        for (d, x) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for j in 0..c {
                sum_dy[j] += d[j];
                sum_dyx[j] += d[j] * x[j];
            }
        }
        if param_grads {
            self.gamma.grad += &Array1::from(sum_dyx.clone()).into_dyn();
            self.beta.grad += &Array1::from(sum_dy.clone()).into_dyn();
        }
        let gamma = Self::vec(&self.gamma).to_vec();
        let inv_std = cache.inv_std.as_slice().expect("contiguous");
        let mut dx = Vec::with_capacity(dy.len());
        match cache.mode {
            Mode::Infer => {
                for d in dy.chunks_exact(c) {
                    dx.extend((0..c).map(|j| d[j] * gamma[j] * inv_std[j]));
                }
            }
            Mode::Train => {
                let mf: T = cast(m as f64);
                let scale: Vec<T> = (0..c).map(|j| gamma[j] * inv_std[j] / mf).collect();
                for (d, x) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    dx.extend((0..c).map(|j| scale[j] * (d[j] * mf - sum_dy[j] - x[j] * sum_dyx[j])));
                }
            }
        }
        Array4::from_shape_vec(cache.dim, dx).expect("unflatten grad")
    }
}

impl<T: Real> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&scoped(prefix, "gamma"), &self.gamma);
        f(&scoped(prefix, "beta"), &self.beta);
        f(&scoped(prefix, "running_mean"), &self.running_mean);
        f(&scoped(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "gamma"), &mut self.gamma);
        f(&scoped(prefix, "beta"), &mut self.beta);
        f(&scoped(prefix, "running_mean"), &mut self.running_mean);
        f(&scoped(prefix, "running_var"), &mut self.running_var);
    }
}
