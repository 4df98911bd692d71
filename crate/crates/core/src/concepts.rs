//! Logistic-regression concept vectors in `w` space, attribute editing and
//! latent interpolation.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::alae::sigmoid;
use crate::dataset::{BinaryTask, Split};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticOptions {
    /// L2 penalty on the coefficients (the bias is not penalized).
    pub lambda: f64,
    pub max_iterations: usize,
    /// Stop once the gradient's ∞-norm falls below this.
    pub tolerance: f64,
    /// Fit on per-feature standardized inputs, then map back to raw space.
    pub standardize: bool,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            lambda: DEFAULT_LAMBDA,
            max_iterations: 10_000,
            tolerance: 1e-6,
            standardize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    /// In raw feature space.
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// ∞-norm of the objective gradient at the returned point.
    pub gradient_norm: f64,
}

impl LogisticFit {
    pub fn logit(&self, w: ArrayView1<'_, f64>) -> f64 {
        self.bias + w.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Mean binary cross-entropy plus `λ‖c‖²` for logits `s = Xc + b`.
fn objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    let d = x.ncols();
    let s = x * beta.rows(0, d) + DVector::from_element(x.nrows(), beta[d]);
    let n = x.nrows() as f64;
    let data: f64 = s
        .iter()
        .zip(y.iter())
        .map(|(&s, &y)| s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s)
        .sum();
    data / n + lambda * beta.rows(0, d).norm_squared()
}

fn gradient_hessian(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    lambda: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let s = x * beta.rows(0, d) + DVector::from_element(n, beta[d]);
    let p = s.map(sigmoid);
    let r = (&p - y) / n as f64;
    let mut g = DVector::zeros(d + 1);
    g.rows_mut(0, d).copy_from(&(x.transpose() * &r + beta.rows(0, d) * (2.0 * lambda)));
    g[d] = r.sum();
    let wts = p.map(|p| p * (1.0 - p) / n as f64);
    let mut xa = DMatrix::zeros(n, d + 1);
    xa.columns_mut(0, d).copy_from(x);
    xa.column_mut(d).fill(1.0);
    let mut xw = xa.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= wts[i];
    }
    let mut h = xa.transpose() * xw;
    for j in 0..d {
        h[(j, j)] += 2.0 * lambda;
    }
    (g, h)
}

/// Newton's method with backtracking on the regularized mean cross-entropy.
pub fn fit_logistic(ws: &Array2<f64>, labels: &[bool], options: &LogisticOptions) -> Result<LogisticFit> {
    let (n, d) = ws.dim();
    if n != labels.len() {
        return Err(Error::shape(format!("{n} feature rows but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::invalid("logistic regression needs at least 2 samples"));
    }
    if !(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)) {
        return Err(Error::SingleClass);
    }
    if options.lambda < 0.0 || !options.lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be >= 0, got {}", options.lambda)));
    }
    if ws.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic regression features".into()));
    }

    let (mu, sigma) = if options.standardize {
        let mu: Vec<f64> = (0..d).map(|j| ws.column(j).mean().unwrap_or(0.0)).collect();
        let sigma: Vec<f64> = (0..d)
            .map(|j| {
                let s = ws.column(j).std(0.0);
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        (mu, sigma)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let x = DMatrix::from_fn(n, d, |i, j| (ws[[i, j]] - mu[j]) / sigma[j]);
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));

    let mut beta = DVector::zeros(d + 1);
    let mut f = objective(&x, &y, &beta, options.lambda);
    let mut iterations = 0;
    let mut gnorm;
    loop {
        let (g, mut h) = gradient_hessian(&x, &y, &beta, options.lambda);
        gnorm = g.amax();
        if gnorm < options.tolerance || iterations >= options.max_iterations {
            break;
        }
        iterations += 1;
        let step = loop {
            if let Some(ch) = h.clone().cholesky() {
                break ch.solve(&g);
            }
            // only reachable when λ = 0 and the curvature collapses
            let jitter = 1e-10 * h.diagonal().amax().max(1.0);
            for j in 0..=d {
                h[(j, j)] += jitter;
            }
        };
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let candidate = &beta - &step * t;
            let fc = objective(&x, &y, &candidate, options.lambda);
            if fc <= f - 1e-4 * t * slope {
                beta = candidate;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no further decrease is representable
            break;
        }
    }

    let coefficients: Vec<f64> = (0..d).map(|j| beta[j] / sigma[j]).collect();
    let bias = beta[d] - (0..d).map(|j| beta[j] * mu[j] / sigma[j]).sum::<f64>();
    Ok(LogisticFit {
        coefficients,
        bias,
        iterations,
        gradient_norm: gnorm,
    })
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub split: Split,
    pub n: usize,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    /// `None` when the split has no positives.
    pub sensitivity: Option<f64>,
    /// `None` when the split has no negatives.
    pub specificity: Option<f64>,
}

/// Confusion-matrix metrics of `score >= threshold` against `labels`.
pub fn classify_metrics(split: Split, scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsRow> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::invalid("metrics of an empty split"));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { None } else { Some(a as f64 / (a + b) as f64) };
    Ok(MetricsRow {
        split,
        n: scores.len(),
        tp,
        tn,
        fp,
        fn_,
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp),
    })
}

// ---------------------------------------------------------------------------
// concept vectors

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub task: BinaryTask,
    pub positive_class: String,
    pub negative_class: String,
    /// Unit L2 norm.
    pub direction: Vec<f64>,
    pub bias: f64,
    pub raw_coefficients: Vec<f64>,
    pub lambda: f64,
    pub metrics: Vec<MetricsRow>,
    /// Fingerprint of the dataset the concept was fitted on.
    #[serde(with = "hex_bytes")]
    pub fingerprint: [u8; 32],
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("fingerprint must be 32 bytes"))
    }
}

/// `c / ‖c‖₂`
pub fn normalize(coefficients: &[f64]) -> Result<Vec<f64>> {
    let norm = coefficients.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Training("concept coefficients have zero or non-finite norm".into()));
    }
    Ok(coefficients.iter().map(|c| c / norm).collect())
}

impl ConceptVector {
    /// Classifier logit `c·w + b` with the raw coefficients.
    pub fn logit(&self, w: &[f64]) -> f64 {
        self.bias + w.iter().zip(&self.raw_coefficients).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, w: &[f64]) -> bool {
        sigmoid(self.logit(w)) >= 0.5
    }

    pub fn metrics_for(&self, split: Split) -> Option<&MetricsRow> {
        self.metrics.iter().find(|m| m.split == split)
    }
}

/// Features and labels of one split for one task.
pub struct SplitData<'a> {
    pub split: Split,
    pub ws: &'a Array2<f64>,
    pub labels: &'a [bool],
}

/// Fits on the train split and scores every given split.
pub fn build_concept(
    task: BinaryTask,
    splits: &[SplitData<'_>],
    options: &LogisticOptions,
    fingerprint: [u8; 32],
) -> Result<ConceptVector> {
    let train = splits
        .iter()
        .find(|s| s.split == Split::Train)
        .ok_or_else(|| Error::invalid("concept fitting needs a train split"))?;
    let fit = fit_logistic(train.ws, train.labels, options)?;
    let direction = normalize(&fit.coefficients)?;
    let metrics = splits
        .iter()
        .filter(|s| !s.labels.is_empty())
        .map(|s| {
            let scores: Vec<f64> = s.ws.rows().into_iter().map(|w| sigmoid(fit.logit(w))).collect();
            classify_metrics(s.split, &scores, s.labels, 0.5)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConceptVector {
        task,
        positive_class: task.positive_class().to_string(),
        negative_class: task.negative_class().to_string(),
        direction,
        bias: fit.bias,
        raw_coefficients: fit.coefficients,
        lambda: options.lambda,
        metrics,
        fingerprint,
    })
}

/// `w + alpha · direction`
pub fn edit_latent(w: &[f64], concept: &ConceptVector, alpha: f64) -> Result<Vec<f64>> {
    if w.len() != concept.direction.len() {
        return Err(Error::shape(format!(
            "latent has {} values, concept direction {}",
            w.len(),
            concept.direction.len()
        )));
    }
    Ok(w.iter().zip(&concept.direction).map(|(w, d)| w + alpha * d).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMode {
    #[default]
    Linear,
    Slerp,
}

impl std::str::FromStr for InterpolationMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(InterpolationMode::Linear),
            "slerp" => Ok(InterpolationMode::Slerp),
            other => Err(format!("unknown interpolation mode `{other}` (expected linear or slerp)")),
        }
    }
}

pub fn interpolate(w1: &[f64], w2: &[f64], t: f64, mode: InterpolationMode) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation t must lie in [0, 1], got {t}")));
    }
    if w1.len() != w2.len() {
        return Err(Error::shape(format!("latents of length {} and {}", w1.len(), w2.len())));
    }
    let linear = || w1.iter().zip(w2).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    if mode == InterpolationMode::Linear {
        return Ok(linear());
    }
    let n1 = w1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = w2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(linear());
    }
    let cos = (w1.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>() / (n1 * n2)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega < 1e-6 {
        return Ok(linear());
    }
    let s = omega.sin();
    let (a, b) = (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s);
    Ok(w1.iter().zip(w2).map(|(x, y)| a * x + b * y).collect())
}

// ---------------------------------------------------------------------------
// table

pub const TABLE_HEADER: &str = "Concept & Binary Classes & Dataset & Accuracy & Sensitivity & Specificity";

pub fn concept_title(task: BinaryTask) -> (&'static str, &'static str) {
    match task {
        BinaryTask::ThinVsThick => ("Keratin Thickness", "Thin vs. Thick Keratosis"),
        BinaryTask::BasketweaveVsParakeratosis => ("Parakeratosis", "Basketweave vs. Parakeratosis"),
        BinaryTask::MildVsFull => ("Dysplasia", "Mild Dysplasia vs. Full-thickness"),
        BinaryTask::NormalVsSolar => ("Solar Damage", "Normal Dermis vs. Solar Damage"),
        BinaryTask::NormalVsInflammation => ("Inflammation", "Normal Dermis vs. Inflammation"),
    }
}

pub fn split_title(split: Split) -> &'static str {
    match split {
        Split::Train => "Train",
        Split::Val => "Val.",
        Split::Test => "Test",
    }
}

pub fn format_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    }
}

/// One `&`-separated line per concept and split, under [`TABLE_HEADER`].
pub fn format_table(concepts: &[ConceptVector]) -> String {
    let mut out = format!("{TABLE_HEADER} \\\\\n");
    for c in concepts {
        let (name, classes) = concept_title(c.task);
        for m in &c.metrics {
            out.push_str(&format!(
                "{name} & {classes} & {} & {} & {} & {} \\\\\n",
                split_title(m.split),
                format_metric(Some(m.accuracy)),
                format_metric(m.sensitivity),
                format_metric(m.specificity),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separable_pair() {
        let fit = fit_logistic(&array![[-1.0], [1.0]], &[false, true], &LogisticOptions::default()).unwrap();
        assert!(fit.coefficients[0] > 0.0);
        assert!(fit.logit(array![-1.0].view()) < 0.0 && fit.logit(array![1.0].view()) > 0.0);
        assert!(fit.gradient_norm < 1e-6);
    }

    #[test]
    fn single_class_rejected() {
        let err = fit_logistic(&array![[0.0], [1.0]], &[true, true], &LogisticOptions::default());
        assert!(matches!(err, Err(Error::SingleClass)));
    }

    #[test]
    fn metrics_examples() {
        let perfect = classify_metrics(Split::Test, &[0.9, 0.1, 0.7, 0.2], &[true, false, true, false], 0.5).unwrap();
        assert_eq!((perfect.accuracy, perfect.sensitivity, perfect.specificity), (1.0, Some(1.0), Some(1.0)));
        let negatives = classify_metrics(Split::Test, &[0.1; 4], &[true, true, false, false], 0.5).unwrap();
        assert_eq!(
            (negatives.accuracy, negatives.sensitivity, negatives.specificity),
            (0.5, Some(0.0), Some(1.0))
        );
        let no_pos = classify_metrics(Split::Val, &[0.1, 0.9], &[false, false], 0.5).unwrap();
        assert_eq!(no_pos.sensitivity, None);
        assert_eq!(format_metric(no_pos.sensitivity), "n/a");
    }

    #[test]
    fn table_layout() {
        let concept = ConceptVector {
            task: BinaryTask::ThinVsThick,
            positive_class: "thick".into(),
            negative_class: "thin".into(),
            direction: vec![1.0],
            bias: 0.0,
            raw_coefficients: vec![2.0],
            lambda: 0.01,
            metrics: vec![MetricsRow {
                split: Split::Test,
                n: 1,
                tp: 0,
                tn: 0,
                fp: 0,
                fn_: 0,
                accuracy: 0.9853,
                sensitivity: Some(0.9973),
                specificity: Some(0.9753),
            }],
            fingerprint: [0; 32],
        };
        let table = format_table(&[concept]);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("Concept & Binary Classes & Dataset & Accuracy & Sensitivity & Specificity"));
        assert_eq!(
            lines[1],
            "Keratin Thickness & Thin vs. Thick Keratosis & Test & 0.9853 & 0.9973 & 0.9753 \\\\"
        );
    }

    #[test]
    fn interpolation_endpoints_and_errors() {
        let a = [0.0, 0.0];
        let b = [2.0, 2.0];
        assert_eq!(interpolate(&a, &b, 0.5, InterpolationMode::Linear).unwrap(), vec![1.0, 1.0]);
        assert!(interpolate(&a, &b, 1.5, InterpolationMode::Linear).is_err());
        assert!(interpolate(&a, &b, -0.1, InterpolationMode::Slerp).is_err());
        let (x, y) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(interpolate(&x, &y, 0.0, InterpolationMode::Slerp).unwrap(), x.to_vec());
        let end = interpolate(&x, &y, 1.0, InterpolationMode::Slerp).unwrap();
        assert!((end[0] - 0.0).abs() < 1e-15 && (end[1] - 1.0).abs() < 1e-15);
    }
}
