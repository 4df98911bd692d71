use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

use super::{normal_array, scoped, Param, Parameterized, Real};
use crate::{Error, Result};

/// Square-kernel convolution, stride 1, zero padding `kernel / 2`, so the
/// spatial size is preserved. Weight layout `(k, k, in, out)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input: Array4<T>,
}

/// Upper bound on the im2col buffer, in elements. Large batches are
/// processed a few images at a time so the buffer stays cache-sized.
const CHUNK_ELEMS: usize = 1 << 20;

/// Largest `in * out` channel product handled by the direct loops.
const DIRECT_MAX: usize = 32 * 32;

impl<T: Real> Conv2d<T> {
    /// He-normal initialisation with the leaky-ReLU gain.
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize, rng: &mut impl rand::Rng) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = (kernel * kernel * in_channels) as f64;
        let gain = (2.0 / (1.0 + super::LEAKY_SLOPE * super::LEAKY_SLOPE)).sqrt();
        let weight = normal_array(&[kernel, kernel, in_channels, out_channels], gain / fan_in.sqrt(), rng);
        Conv2d {
            weight: Param::new(weight),
            bias: Param::new(ndarray::ArrayD::zeros(IxDyn(&[out_channels]))),
            kernel,
            in_channels,
            out_channels,
        }
    }

    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Conv2d {
            weight: Param::new(ndarray::ArrayD::zeros(IxDyn(&[kernel, kernel, in_channels, out_channels]))),
            bias: Param::new(ndarray::ArrayD::zeros(IxDyn(&[out_channels]))),
            kernel,
            in_channels,
            out_channels,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.kernel * self.kernel * self.in_channels, self.out_channels))
            .expect("contiguous conv weight")
    }

    fn check(&self, x: &Array4<T>) -> Result<()> {
        let c = x.dim().3;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<(Array4<T>, ConvCache<T>)> {
        let y = self.infer(x)?;
        Ok((
            y,
            ConvCache {
                input: x.as_standard_layout().into_owned(),
            },
        ))
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check(x)?;
        Ok(self.infer_with(x, self.direct()))
    }

    fn infer_with(&self, x: &Array4<T>, direct: bool) -> Array4<T> {
        let (n, h, w, _) = x.dim();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let pixels = h * w;
        if direct {
            let y = self.direct_forward(src, (n, h, w));
            return Array4::from_shape_vec((n, h, w, self.out_channels), y).expect("conv output shape");
        }
        let mut y = Array2::<T>::zeros((n * pixels, self.out_channels));
        let wm = self.weight_matrix();
        let mut buf = Vec::new();
        for (b0, b1) in self.chunks(n, pixels) {
            let cols = self.cols(src, (b0, b1), (h, w), &mut buf);
            let mut out = y.slice_mut(s![b0 * pixels..b1 * pixels, ..]);
            general_mat_mul(T::one(), &cols, &wm, T::zero(), &mut out);
        }
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        y += &bias;
        y.into_shape_with_order((n, h, w, self.out_channels))
            .expect("conv output reshape")
    }

    /// Narrow layers skip im2col: a GEMM with a handful of output columns
    /// spends most of its time packing.
    fn direct(&self) -> bool {
        self.in_channels * self.out_channels <= DIRECT_MAX
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every in-bounds kernel tap.
    fn taps(&self, (n, h, w): (usize, usize, usize), mut f: impl FnMut(usize, usize, usize)) {
        let (k, pad) = (self.kernel, self.kernel / 2);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let out = (b * h + y) * w + x;
                    for ky in 0..k {
                        let iy = y + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = x + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            f(out, (b * h + iy - pad) * w + ix - pad, ky * k + kx);
                        }
                    }
                }
            }
        }
    }

    fn direct_forward(&self, src: &[T], dims: (usize, usize, usize)) -> Vec<T> {
        let (ci, co) = (self.in_channels, self.out_channels);
        let wt = self.weight.value.as_slice().expect("contiguous conv weight");
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        let mut y: Vec<T> = bias.iter().copied().cycle().take(dims.0 * dims.1 * dims.2 * co).collect();
        self.taps(dims, |o, i, t| {
            let acc = &mut y[o * co..(o + 1) * co];
            let taps = &wt[t * ci * co..(t + 1) * ci * co];
            for (&v, row) in src[i * ci..(i + 1) * ci].iter().zip(taps.chunks_exact(co)) {
                for (a, &wv) in acc.iter_mut().zip(row) {
                    *a += v * wv;
                }
            }
        });
        y
    }

    fn direct_backward(&mut self, src: &[T], dy: &[T], dims: (usize, usize, usize), param_grads: bool) -> Array4<T> {
        let (ci, co) = (self.in_channels, self.out_channels);
        let taps = self.kernel * self.kernel;
        // weights transposed per tap to (out, in) so the inner loop is contiguous
        let wt = self.weight.value.as_slice().expect("contiguous conv weight");
        let mut wtt = vec![T::zero(); wt.len()];
        for t in 0..taps {
            for a in 0..ci {
                for b in 0..co {
                    wtt[(t * co + b) * ci + a] = wt[(t * ci + a) * co + b];
                }
            }
        }
        let mut dx = vec![T::zero(); src.len()];
        let mut dw = vec![T::zero(); wt.len()];
        self.taps(dims, |o, i, t| {
            let g = &dy[o * co..(o + 1) * co];
            let dxi = &mut dx[i * ci..(i + 1) * ci];
            for (&gv, row) in g.iter().zip(wtt[t * ci * co..(t + 1) * ci * co].chunks_exact(ci)) {
                for (d, &wv) in dxi.iter_mut().zip(row) {
                    *d += gv * wv;
                }
            }
            if param_grads {
                let dwt = &mut dw[t * ci * co..(t + 1) * ci * co];
                for (&xv, row) in src[i * ci..(i + 1) * ci].iter().zip(dwt.chunks_exact_mut(co)) {
                    for (d, &gv) in row.iter_mut().zip(g) {
                        *d += xv * gv;
                    }
                }
            }
        });
        if param_grads {
            let dw = ArrayD::from_shape_vec(self.weight.value.raw_dim(), dw).expect("conv weight grad shape");
            self.weight.grad += &dw;
            let mut db = vec![T::zero(); co];
            for g in dy.chunks_exact(co) {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            self.bias.grad += &Array1::from(db).into_dyn();
        }
        let (n, h, w) = dims;
        Array4::from_shape_vec((n, h, w, ci), dx).expect("conv input grad")
    }

    fn width(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    /// Image ranges whose im2col rows fit in one buffer.
    fn chunks(&self, n: usize, pixels: usize) -> Vec<(usize, usize)> {
        let per = (CHUNK_ELEMS / (pixels * self.width()).max(1)).max(1);
        (0..n).step_by(per).map(|b| (b, (b + per).min(n))).collect()
    }

    /// im2col rows of images `b0..b1`; 1x1 kernels borrow the input.
    fn cols<'a>(
        &self,
        src: &'a [T],
        (b0, b1): (usize, usize),
        (h, w): (usize, usize),
        buf: &'a mut Vec<T>,
    ) -> ArrayView2<'a, T> {
        let c = self.in_channels;
        let rows = (b1 - b0) * h * w;
        if self.kernel == 1 {
            return ArrayView2::from_shape((rows, c), &src[b0 * h * w * c..b1 * h * w * c]).expect("1x1 cols");
        }
        buf.clear();
        buf.resize(rows * self.width(), T::zero());
        im2col(&src[b0 * h * w * c..b1 * h * w * c], (b1 - b0, h, w, c), self.kernel, buf);
        ArrayView2::from_shape((rows, self.width()), &buf[..]).expect("cols shape")
    }

    /// Returns the input gradient; parameter gradients are accumulated only
    /// when `param_grads` is set.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Array4<T>, param_grads: bool) -> Array4<T> {
        let direct = self.direct();
        self.backward_with(cache, dy, param_grads, direct)
    }

    fn backward_with(&mut self, cache: &ConvCache<T>, dy: &Array4<T>, param_grads: bool, direct: bool) -> Array4<T> {
        let (n, h, w, c) = cache.input.dim();
        let pixels = h * w;
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * pixels, self.out_channels))
            .expect("conv grad reshape");
        let src = cache.input.as_slice().expect("standard layout");
        if direct {
            return self.direct_backward(src, dy2.as_slice().expect("standard layout"), (n, h, w), param_grads);
        }
        let mut dx = vec![T::zero(); n * pixels * c];
        let mut dw = Array2::<T>::zeros((self.width(), self.out_channels));
        let mut buf = Vec::new();
        let mut dcols = Vec::new();
        for (b0, b1) in self.chunks(n, pixels) {
            let rows = (b1 - b0) * pixels;
            let dyc = dy2.slice(s![b0 * pixels..b1 * pixels, ..]);
            if param_grads {
                let cols = self.cols(src, (b0, b1), (h, w), &mut buf);
                general_mat_mul(T::one(), &cols.t(), &dyc, T::one(), &mut dw);
            }
            let dxc = &mut dx[b0 * pixels * c..b1 * pixels * c];
            if self.kernel == 1 {
                let mut out = ArrayViewMut2::from_shape((rows, c), dxc).expect("1x1 grad");
                general_mat_mul(T::one(), &dyc, &self.weight_matrix().t(), T::zero(), &mut out);
                continue;
            }
            dcols.clear();
            dcols.resize(rows * self.width(), T::zero());
            let mut out = ArrayViewMut2::from_shape((rows, self.width()), &mut dcols[..]).expect("dcols shape");
            general_mat_mul(T::one(), &dyc, &self.weight_matrix().t(), T::zero(), &mut out);
            col2im(&dcols, (b1 - b0, h, w, c), self.kernel, dxc);
        }
        if param_grads {
            let dw = dw
                .into_shape_with_order(IxDyn(&[self.kernel, self.kernel, self.in_channels, self.out_channels]))
                .expect("conv weight grad reshape");
            self.weight.grad += &dw;
            let db: Array1<T> = dy2.sum_axis(Axis(0));
            self.bias.grad += &db.into_dyn();
        }
        Array4::from_shape_vec((n, h, w, c), dx).expect("conv input grad")
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&scoped(prefix, "weight"), &self.weight);
        f(&scoped(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        f(&scoped(prefix, "bias"), &mut self.bias);
    }
}

/// Rows are output pixels in NHW order, columns are `(ky, kx, c)`. `cols`
/// must be zeroed; padding entries are left untouched.
fn im2col<T: Real>(src: &[T], (n, h, w, c): (usize, usize, usize, usize), kernel: usize, cols: &mut [T]) {
    let pad = kernel / 2;
    let width = kernel * kernel * c;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let base = ((b * h + y) * w + xx) * width;
                for ky in 0..kernel {
                    let iy = y + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..kernel {
                        let ix = xx + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let ix = ix - pad;
                        let s = ((b * h + iy) * w + ix) * c;
                        let d = base + (ky * kernel + kx) * c;
                        cols[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients back onto the (zeroed) input gradient.
fn col2im<T: Real>(src: &[T], (n, h, w, c): (usize, usize, usize, usize), kernel: usize, dx: &mut [T]) {
    let pad = kernel / 2;
    let width = kernel * kernel * c;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let base = ((b * h + y) * w + xx) * width;
                for ky in 0..kernel {
                    let iy = y + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..kernel {
                        let ix = xx + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let ix = ix - pad;
                        let d = ((b * h + iy) * w + ix) * c;
                        let s = base + (ky * kernel + kx) * c;
                        for (o, &g) in dx[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Array4<f64>, conv: &Conv2d<f64>) -> Array4<f64> {
        let (n, h, w, _) = x.dim();
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut y = Array4::zeros((n, h, w, conv.out_channels));
        for b in 0..n {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    for o in 0..conv.out_channels {
                        let mut acc = conv.bias.value[[o]];
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (i + ky - pad, j + kx - pad);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for c in 0..conv.in_channels {
                                    acc += x[[b, iy as usize, ix as usize, c]]
                                        * conv.weight.value[[ky as usize, kx as usize, c, o]];
                                }
                            }
                        }
                        y[[b, i as usize, j as usize, o]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kernel in [1, 3] {
            let mut conv = Conv2d::<f64>::new(kernel, 3, 5, &mut rng);
            conv.bias.value = normal_array(&[5], 1.0, &mut rng);
            let x = normal_array::<f64>(&[2, 5, 4, 3], 1.0, &mut rng)
                .into_dimensionality()
                .unwrap();
            let slow = naive_conv(&x, &conv);
            for direct in [true, false] {
                let fast = conv.infer_with(&x, direct);
                let err = (&fast - &slow).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
                assert!(err < 1e-12, "kernel {kernel} direct {direct}: max err {err}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new(3, 4, 4, &mut rng);
        assert!(conv.infer(&Array4::zeros((1, 4, 4, 3))).is_err());
    }

    #[test]
    fn chunked_batches_match_per_image_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d::<f64>::new(3, 40, 30, &mut rng);
        assert!(!conv.direct());
        let x: Array4<f64> = normal_array::<f64>(&[6, 32, 32, 40], 1.0, &mut rng).into_dimensionality().unwrap();
        let dy: Array4<f64> = normal_array::<f64>(&[6, 32, 32, 30], 1.0, &mut rng).into_dimensionality().unwrap();
        assert!(conv.chunks(6, 32 * 32).len() > 1);
        let (y, cache) = conv.forward(&x).unwrap();
        let dx = conv.backward(&cache, &dy, true);
        let dw = conv.weight.grad.clone();
        let mut single = conv.clone();
        single.weight.zero_grad();
        for b in 0..6 {
            let xb = x.slice(s![b..b + 1, .., .., ..]).to_owned();
            let dyb = dy.slice(s![b..b + 1, .., .., ..]).to_owned();
            let (yb, cb) = single.forward(&xb).unwrap();
            assert_eq!(yb, y.slice(s![b..b + 1, .., .., ..]));
            let dxb = single.backward(&cb, &dyb, true);
            assert_eq!(dxb, dx.slice(s![b..b + 1, .., .., ..]));
        }
        let err = (&single.weight.grad - &dw).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn direct_and_gemm_backward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kernel in [1, 3] {
            let conv = Conv2d::<f64>::new(kernel, 6, 7, &mut rng);
            let x: Array4<f64> = normal_array::<f64>(&[3, 9, 8, 6], 1.0, &mut rng).into_dimensionality().unwrap();
            let dy: Array4<f64> = normal_array::<f64>(&[3, 9, 8, 7], 1.0, &mut rng).into_dimensionality().unwrap();
            let (_, cache) = conv.forward(&x).unwrap();
            let (mut a, mut b) = (conv.clone(), conv.clone());
            let da = a.backward_with(&cache, &dy, true, true);
            let db = b.backward_with(&cache, &dy, true, false);
            let max = |d: ndarray::ArrayD<f64>| d.mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(max((&da - &db).into_dyn()) < 1e-12);
            assert!(max(&a.weight.grad - &b.weight.grad) < 1e-12);
            assert!(max(&a.bias.grad - &b.bias.grad) < 1e-12);
        }
    }
}
