//! Central-difference gradient oracle shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::{Array, ArrayD, Dimension};
use staged_alae::nn::{zero_grads, Param, Parameterized};

pub const STEP: f64 = 1e-6;

/// Gradients at or below this magnitude are compared absolutely, since
/// central differences carry roughly `1e-10` of rounding noise.
pub const FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn set_entry<M: Parameterized<f64>>(m: &mut M, name: &str, idx: usize, v: f64) {
    m.visit_mut("", &mut |n, p| {
        if n == name {
            *p.value.iter_mut().nth(idx).expect("index in range") = v;
        }
    });
}

fn get_entry<M: Parameterized<f64>>(m: &M, name: &str, idx: usize) -> f64 {
    let mut out = f64::NAN;
    m.visit("", &mut |n, p| {
        if n == name {
            out = *p.value.iter().nth(idx).expect("index in range");
        }
    });
    out
}

/// Entries to probe in a tensor of `len` values: all of them when small,
/// otherwise an even stride capped at `max`.
fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let stride = len as f64 / max as f64;
        (0..max).map(|i| (i as f64 * stride) as usize).collect()
    }
}

pub struct Report {
    pub worst: f64,
    pub worst_at: String,
    pub checked: usize,
}

/// Runs `backprop` once to get analytic gradients, then compares each
/// selected parameter entry against a central difference of `loss`.
/// Parameters are those whose names satisfy `select` and are trainable.
pub fn check_params<M: Parameterized<f64>>(
    m: &mut M,
    select: impl Fn(&str) -> bool,
    max_per_tensor: usize,
    mut backprop: impl FnMut(&mut M),
    mut loss: impl FnMut(&mut M) -> f64,
) -> Report {
    zero_grads(m);
    backprop(m);
    let mut analytic: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    m.visit("", &mut |n, p: &Param<f64>| {
        if p.trainable && select(n) {
            analytic.insert(n.to_string(), p.grad.clone());
        }
    });
    assert!(!analytic.is_empty(), "no parameters selected");
    let mut report = Report {
        worst: 0.0,
        worst_at: String::new(),
        checked: 0,
    };
    for (name, grad) in &analytic {
        for idx in probe_indices(grad.len(), max_per_tensor) {
            let v0 = get_entry(m, name, idx);
            set_entry(m, name, idx, v0 + STEP);
            let lp = loss(m);
            set_entry(m, name, idx, v0 - STEP);
            let lm = loss(m);
            set_entry(m, name, idx, v0);
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = *grad.iter().nth(idx).unwrap();
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.worst_at = format!("{name}[{idx}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    report
}

/// Central-difference gradient of a scalar function of an array.
pub fn numeric_input_grad<D: Dimension>(x: &Array<f64, D>, f: impl Fn(&Array<f64, D>) -> f64) -> Array<f64, D> {
    let mut g = x.clone();
    let mut xp = x.clone();
    for i in 0..x.len() {
        let v0 = *x.iter().nth(i).unwrap();
        *xp.iter_mut().nth(i).unwrap() = v0 + STEP;
        let lp = f(&xp);
        *xp.iter_mut().nth(i).unwrap() = v0 - STEP;
        let lm = f(&xp);
        *xp.iter_mut().nth(i).unwrap() = v0;
        *g.iter_mut().nth(i).unwrap() = (lp - lm) / (2.0 * STEP);
    }
    g
}

pub fn max_rel_err<D: Dimension>(a: &Array<f64, D>, n: &Array<f64, D>) -> f64 {
    a.iter().zip(n.iter()).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Deterministic pseudo-random fill in roughly `[-1, 1]`.
pub fn wavy<D: Dimension>(shape: D, salt: f64) -> Array<f64, D> {
    let mut i = 0.0f64;
    Array::from_shape_simple_fn(shape, || {
        i += 1.0;
        ((i * 12.9898 + salt * 78.233).sin() * 43_758.545_3).fract().abs() * 2.0 - 1.0
    })
}
