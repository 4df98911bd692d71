use ndarray::Array4;

use super::{
    leaky_relu, leaky_relu_backward, scoped, BatchNorm2d, Conv2d, ConvCache, Mode, NormCache, Param,
    Parameterized, Real, LEAKY_SLOPE,
};
use crate::Result;

/// `out = skip(x) + f(x)` with
/// `f = conv3 -> norm -> lrelu(0.2) -> conv3 -> norm -> lrelu(0.2)`.
/// The skip is the identity unless the channel count changes, in which case a
/// 1×1 projection is used.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub norm1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub norm2: BatchNorm2d<T>,
    pub skip: Option<Conv2d<T>>,
}

#[derive(Clone, Debug)]
pub struct ResidualCache<T> {
    conv1: ConvCache<T>,
    norm1: NormCache<T>,
    act1: Array4<T>,
    conv2: ConvCache<T>,
    norm2: NormCache<T>,
    act2: Array4<T>,
    skip: Option<ConvCache<T>>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl rand::Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(3, in_channels, out_channels, rng),
            norm1: BatchNorm2d::new(out_channels),
            conv2: Conv2d::new(3, out_channels, out_channels, rng),
            norm2: BatchNorm2d::new(out_channels),
            skip: (in_channels != out_channels).then(|| Conv2d::new(1, in_channels, out_channels, rng)),
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ResidualBlock {
            conv1: Conv2d::zeros(3, in_channels, out_channels),
            norm1: BatchNorm2d::new(out_channels),
            conv2: Conv2d::zeros(3, out_channels, out_channels),
            norm2: BatchNorm2d::new(out_channels),
            skip: (in_channels != out_channels).then(|| Conv2d::zeros(1, in_channels, out_channels)),
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, ResidualCache<T>)> {
        let (h, conv1) = self.conv1.forward(x)?;
        let (h, norm1) = self.norm1.forward(&h, mode)?;
        let act1 = leaky_relu(&h, LEAKY_SLOPE);
        let (h, conv2) = self.conv2.forward(&act1)?;
        let (h, norm2) = self.norm2.forward(&h, mode)?;
        let act2 = leaky_relu(&h, LEAKY_SLOPE);
        let (out, skip) = match &self.skip {
            Some(proj) => {
                let (s, c) = proj.forward(x)?;
                (s + &act2, Some(c))
            }
            None => (x + &act2, None),
        };
        Ok((
            out,
            ResidualCache {
                conv1,
                norm1,
                act1,
                conv2,
                norm2,
                act2,
                skip,
            },
        ))
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let h = self.norm1.infer(&self.conv1.infer(x)?)?;
        let h = leaky_relu(&h, LEAKY_SLOPE);
        let h = self.norm2.infer(&self.conv2.infer(&h)?)?;
        let h = leaky_relu(&h, LEAKY_SLOPE);
        Ok(match &self.skip {
            Some(proj) => proj.infer(x)? + &h,
            None => x + &h,
        })
    }

    pub fn backward(&mut self, cache: &ResidualCache<T>, dy: &Array4<T>, param_grads: bool) -> Array4<T> {
        let g = leaky_relu_backward(&cache.act2, dy, LEAKY_SLOPE);
        let g = self.norm2.backward(&cache.norm2, &g, param_grads);
        let g = self.conv2.backward(&cache.conv2, &g, param_grads);
        let g = leaky_relu_backward(&cache.act1, &g, LEAKY_SLOPE);
        let g = self.norm1.backward(&cache.norm1, &g, param_grads);
        let g = self.conv1.backward(&cache.conv1, &g, param_grads);
        match (&mut self.skip, &cache.skip) {
            (Some(proj), Some(c)) => g + &proj.backward(c, dy, param_grads),
            _ => g + dy,
        }
    }
}

impl<T: Real> Parameterized<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&scoped(prefix, "conv1"), f);
        self.norm1.visit(&scoped(prefix, "norm1"), f);
        self.conv2.visit(&scoped(prefix, "conv2"), f);
        self.norm2.visit(&scoped(prefix, "norm2"), f);
        if let Some(s) = &self.skip {
            s.visit(&scoped(prefix, "skip"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&scoped(prefix, "conv1"), f);
        self.norm1.visit_mut(&scoped(prefix, "norm1"), f);
        self.conv2.visit_mut(&scoped(prefix, "conv2"), f);
        self.norm2.visit_mut(&scoped(prefix, "norm2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&scoped(prefix, "skip"), f);
        }
    }
}
