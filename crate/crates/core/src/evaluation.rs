//! Fréchet distance between Gaussian fits of image embeddings, and
//! reconstruction reports.

use chrono::{DateTime, Utc};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alae::Alae;
use crate::autoencoder::Autoencoder;
use crate::dataset::{ImageSet, Split};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl ActivationStats {
    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    fn check_finite(&self) -> Result<()> {
        if self.mean.iter().chain(self.covariance.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("activation statistics contain non-finite values".into()))
        }
    }
}

fn to_matrix(features: &Array2<f64>) -> DMatrix<f64> {
    let (n, d) = features.dim();
    DMatrix::from_fn(n, d, |i, j| features[[i, j]])
}

/// Sample mean and unbiased covariance, symmetrized.
pub fn activation_stats(features: &Array2<f64>) -> Result<ActivationStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("activation statistics need >= 2 rows, got {n}")));
    }
    let x = to_matrix(features);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let c = centered.transpose() * &centered / (n as f64 - 1.0);
    let stats = ActivationStats {
        mean,
        covariance: (&c + c.transpose()) * 0.5,
        count: n,
    };
    stats.check_finite()?;
    Ok(stats)
}

/// Streaming form of [`activation_stats`]; partial accumulators merge with
/// the pairwise update, so batches can be processed in any grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsAccumulator {
    count: usize,
    mean: DVector<f64>,
    /// Sum of outer products of deviations from the running mean.
    scatter: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dimension: usize) -> Self {
        StatsAccumulator {
            count: 0,
            mean: DVector::zeros(dimension),
            scatter: DMatrix::zeros(dimension, dimension),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, features: &Array2<f64>) -> Result<()> {
        if features.nrows() == 0 {
            return Ok(());
        }
        if features.ncols() != self.mean.len() {
            return Err(Error::shape(format!(
                "feature width {} does not match accumulator dimension {}",
                features.ncols(),
                self.mean.len()
            )));
        }
        let n = features.nrows();
        let x = to_matrix(features);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j]);
        let part = StatsAccumulator {
            count: n,
            mean,
            scatter: centered.transpose() * &centered,
        };
        self.merge(&part)
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.mean.len() != self.mean.len() {
            return Err(Error::shape("accumulator dimensions differ"));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.scatter += &other.scatter + &delta * delta.transpose() * (na * nb / n);
        self.mean += &delta * (nb / n);
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<ActivationStats> {
        if self.count < 2 {
            return Err(Error::invalid(format!(
                "activation statistics need >= 2 rows, got {}",
                self.count
            )));
        }
        let c = &self.scatter / (self.count as f64 - 1.0);
        let stats = ActivationStats {
            mean: self.mean.clone(),
            covariance: (&c + c.transpose()) * 0.5,
            count: self.count,
        };
        stats.check_finite()?;
        Ok(stats)
    }
}

fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// negative eigenvalues from roundoff are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetric_eigen(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Σa^½ Σb Σa^½`, symmetrized.
pub fn product_form(a: &ActivationStats, b: &ActivationStats) -> DMatrix<f64> {
    let sa = sqrtm_psd(&a.covariance);
    let m = &sa * &b.covariance * &sa;
    (&m + m.transpose()) * 0.5
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, clamped at zero.
pub fn fid(a: &ActivationStats, b: &ActivationStats) -> Result<f64> {
    if a.dimension() != b.dimension() {
        return Err(Error::shape(format!(
            "FID of {}-d and {}-d statistics",
            a.dimension(),
            b.dimension()
        )));
    }
    a.check_finite()?;
    b.check_finite()?;
    let diff = (&a.mean - &b.mean).norm_squared();
    let tr_root: f64 = symmetric_eigen(&product_form(a, b))
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let value = diff + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_root;
    if !value.is_finite() {
        return Err(Error::NonFinite("FID is not finite".into()));
    }
    Ok(value.max(0.0))
}

// ---------------------------------------------------------------------------
// embedders

pub trait Embedder: Send + Sync {
    fn name(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, batch: &Array4<f32>) -> Result<Array2<f64>>;
}

/// Average-pools each image to `grid × grid × 3` and applies a fixed
/// Gaussian projection drawn from `seed`.
#[derive(Clone, Debug)]
pub struct RandomProjectionEmbedder {
    pub seed: u64,
    pub grid: usize,
    projection: Array2<f64>,
}

impl RandomProjectionEmbedder {
    pub const DEFAULT_DIMENSION: usize = 64;
    pub const DEFAULT_GRID: usize = 16;

    pub fn new(seed: u64, grid: usize, dimension: usize) -> Result<Self> {
        if grid == 0 || dimension == 0 {
            return Err(Error::invalid("embedder grid and dimension must be positive"));
        }
        let inputs = grid * grid * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((inputs, dimension), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        });
        Ok(RandomProjectionEmbedder { seed, grid, projection })
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(seed, Self::DEFAULT_GRID, Self::DEFAULT_DIMENSION).expect("valid defaults")
    }

    fn pool(&self, batch: &Array4<f32>) -> Result<Array2<f64>> {
        let (n, h, w, c) = batch.dim();
        let g = self.grid;
        if c != 3 || h != w || h % g != 0 {
            return Err(Error::shape(format!(
                "embedder needs square RGB images with side divisible by {g}, got {h}x{w}x{c}"
            )));
        }
        let cell = h / g;
        let inv = 1.0 / (cell * cell) as f64;
        let mut out = Array2::zeros((n, g * g * 3));
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let base = ((y / cell) * g + x / cell) * 3;
                    for ch in 0..3 {
                        out[[b, base + ch]] += batch[[b, y, x, ch]] as f64 * inv;
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn name(&self) -> String {
        format!(
            "random-projection(grid={}, d={}, seed={})",
            self.grid,
            self.projection.ncols(),
            self.seed
        )
    }

    fn dimension(&self) -> usize {
        self.projection.ncols()
    }

    fn embed(&self, batch: &Array4<f32>) -> Result<Array2<f64>> {
        Ok(self.pool(batch)?.dot(&self.projection))
    }
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub embedder: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub fid: f64,
    pub mae: Option<f64>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

fn accumulate(
    batches: impl IntoIterator<Item = Result<Array4<f32>>>,
    embedder: &dyn Embedder,
) -> Result<StatsAccumulator> {
    let mut acc = StatsAccumulator::new(embedder.dimension());
    for batch in batches {
        acc.push(&embedder.embed(&batch?)?)?;
    }
    Ok(acc)
}

/// Embeds both streams and compares their Gaussian fits.
pub fn fid_between_image_sets(
    real: impl IntoIterator<Item = Result<Array4<f32>>>,
    fake: impl IntoIterator<Item = Result<Array4<f32>>>,
    embedder: &dyn Embedder,
) -> Result<FidReport> {
    let started_at = Utc::now();
    let real = accumulate(real, embedder)?.finish()?;
    let fake = accumulate(fake, embedder)?.finish()?;
    Ok(FidReport {
        embedder: embedder.name(),
        n_real: real.count,
        n_fake: fake.count,
        fid: fid(&real, &fake)?,
        mae: None,
        started_at,
        finished_at: Utc::now(),
    })
}

pub trait Reconstructor {
    fn reconstruct_batch(&self, x: &Array4<f32>) -> Result<Array4<f32>>;
}

impl Reconstructor for Autoencoder<f32> {
    fn reconstruct_batch(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.reconstruct(x)
    }
}

impl Reconstructor for Alae<f32> {
    fn reconstruct_batch(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.reconstruct(x)
    }
}

/// Per-image mean absolute error.
pub fn per_image_mae(x: &Array4<f32>, y: &Array4<f32>) -> Result<Vec<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    Ok(x.outer_iter()
        .zip(y.outer_iter())
        .map(|(a, b)| {
            let n = a.len() as f64;
            a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / n
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReconstruction {
    pub split: Split,
    pub n: usize,
    pub mean_mae: f64,
    /// Highest MAE first.
    pub worst: Vec<ImageScore>,
    /// Lowest MAE first.
    pub best: Vec<ImageScore>,
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub model: String,
    pub embedder: Option<String>,
    pub splits: Vec<SplitReconstruction>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReportOptions {
    pub batch_size: usize,
    /// Length of the worst/best lists.
    pub top: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { batch_size: 16, top: 5 }
    }
}

pub fn reconstruction_report(
    model_name: &str,
    model: &dyn Reconstructor,
    splits: &[(Split, &ImageSet)],
    embedder: Option<&dyn Embedder>,
    options: ReportOptions,
) -> Result<ReconstructionReport> {
    let started_at = Utc::now();
    let mut out = Vec::with_capacity(splits.len());
    for &(split, data) in splits {
        if data.is_empty() {
            return Err(Error::invalid(format!("split `{split}` is empty")));
        }
        let mut scores = Vec::with_capacity(data.len());
        let mut real_acc = embedder.map(|e| StatsAccumulator::new(e.dimension()));
        let mut fake_acc = real_acc.clone();
        let mut offset = 0;
        for x in data.sequential(options.batch_size.max(1)) {
            let y = model.reconstruct_batch(&x)?;
            for (i, mae) in per_image_mae(&x, &y)?.into_iter().enumerate() {
                scores.push(ImageScore {
                    id: data.ids[offset + i].clone(),
                    mae,
                });
            }
            offset += x.len_of(Axis(0));
            if let (Some(e), Some(r), Some(f)) = (embedder, real_acc.as_mut(), fake_acc.as_mut()) {
                r.push(&e.embed(&x)?)?;
                f.push(&e.embed(&y)?)?;
            }
        }
        let mean_mae = scores.iter().map(|s| s.mae).sum::<f64>() / scores.len() as f64;
        let fid = match (real_acc, fake_acc) {
            (Some(r), Some(f)) if r.count() >= 2 => Some(fid(&r.finish()?, &f.finish()?)?),
            _ => None,
        };
        scores.sort_by(|a, b| b.mae.total_cmp(&a.mae).then_with(|| a.id.cmp(&b.id)));
        let worst = scores.iter().take(options.top).cloned().collect();
        let best = scores.iter().rev().take(options.top).cloned().collect();
        out.push(SplitReconstruction {
            split,
            n: data.len(),
            mean_mae,
            worst,
            best,
            fid,
        });
    }
    Ok(ReconstructionReport {
        model: model_name.to_string(),
        embedder: embedder.map(|e| e.name()),
        splits: out,
        started_at,
        finished_at: Utc::now(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_point_stats() {
        let s = activation_stats(&array![[0.0, 0.0], [2.0, 0.0]]).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.covariance, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert_eq!(s.count, 2);
        assert!(activation_stats(&array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn identical_rows_have_zero_covariance() {
        let s = activation_stats(&Array2::from_elem((5, 3), 0.7)).unwrap();
        assert!(s.covariance.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = ActivationStats {
            mean: DVector::from_element(1, 0.0),
            covariance: DMatrix::from_element(1, 1, 1.0),
            count: 2,
        };
        let b = ActivationStats {
            mean: DVector::from_element(1, 1.0),
            covariance: DMatrix::from_element(1, 1, 4.0),
            count: 2,
        };
        assert!((fid(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert!(fid(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_and_non_finite_rejected() {
        let a = activation_stats(&array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let b = activation_stats(&array![[0.0], [1.0]]).unwrap();
        assert!(fid(&a, &b).is_err());
        let mut c = a.clone();
        c.mean[0] = f64::NAN;
        assert!(fid(&a, &c).is_err());
    }

    #[test]
    fn embedder_is_seeded_and_checks_shape() {
        let e = RandomProjectionEmbedder::with_seed(3);
        assert_eq!(e.dimension(), 64);
        let x = Array4::from_shape_fn((2, 32, 32, 3), |(b, y, x, c)| ((b + y * x + c) as f32 * 0.01).cos());
        let a = e.embed(&x).unwrap();
        assert_eq!(a.dim(), (2, 64));
        assert_eq!(a, RandomProjectionEmbedder::with_seed(3).embed(&x).unwrap());
        assert_ne!(a, RandomProjectionEmbedder::with_seed(4).embed(&x).unwrap());
        assert!(e.embed(&Array4::zeros((1, 20, 20, 3))).is_err());
    }
}
