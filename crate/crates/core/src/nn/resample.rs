use ndarray::Array4;

use super::{cast, Real};
use crate::{Error, Result};

/// 2×2 average pooling with stride 2.
pub fn avg_pool2<T: Real>(x: &Array4<T>) -> Result<Array4<T>> {
    let (n, h, w, c) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("avg_pool2 needs even spatial dims, got {h}x{w}")));
    }
    let quarter: T = cast(0.25);
    let mut out = Array4::zeros((n, h / 2, w / 2, c));
    for b in 0..n {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                for ch in 0..c {
                    let s = x[[b, 2 * y, 2 * xx, ch]]
                        + x[[b, 2 * y, 2 * xx + 1, ch]]
                        + x[[b, 2 * y + 1, 2 * xx, ch]]
                        + x[[b, 2 * y + 1, 2 * xx + 1, ch]];
                    out[[b, y, xx, ch]] = s * quarter;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Real>(dy: &Array4<T>) -> Array4<T> {
    let (n, h, w, c) = dy.dim();
    let quarter: T = cast(0.25);
    let mut dx = Array4::zeros((n, 2 * h, 2 * w, c));
    for b in 0..n {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                for ch in 0..c {
                    dx[[b, y, xx, ch]] = dy[[b, y / 2, xx / 2, ch]] * quarter;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (n, h, w, c) = x.dim();
    let mut out = Array4::zeros((n, 2 * h, 2 * w, c));
    for b in 0..n {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                for ch in 0..c {
                    out[[b, y, xx, ch]] = x[[b, y / 2, xx / 2, ch]];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Array4<T>) -> Array4<T> {
    let (n, h, w, c) = dy.dim();
    let mut dx = Array4::zeros((n, h / 2, w / 2, c));
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    dx[[b, y / 2, xx / 2, ch]] += dy[[b, y, xx, ch]];
                }
            }
        }
    }
    dx
}
