//! Streaming mean and covariance.
//!
//! Single-pass updates use Welford's recurrence and partial results merge
//! with Chan's pairwise formula, so shards can be accumulated in parallel
//! and combined afterwards.

use nalgebra::{DMatrix, DVector};
use xlate_tensor::Tensor;

use crate::domain::ImageTensor;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::probe::PerceptualProbe;

/// Images per probe forward pass when accumulating.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStatistics {
    mean: Vec<f64>,
    /// Upper triangle of the co-moment sum, row-major `F x F`.
    comoment: Vec<f64>,
    count: usize,
}

impl FeatureStatistics {
    pub fn empty(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            count: 0,
        }
    }

    /// Statistics with a given mean and (sample) covariance.
    pub fn from_moments(mean: Vec<f64>, covariance: &DMatrix<f64>, count: usize) -> Result<Self> {
        let f = mean.len();
        if covariance.shape() != (f, f) {
            return Err(Error::shape("covariance", f, covariance.nrows()));
        }
        if count < 2 {
            return Err(Error::TooFew {
                what: "samples".into(),
                needed: 2,
                found: count,
            });
        }
        let mut comoment = vec![0.0; f * f];
        for i in 0..f {
            for j in 0..f {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-8 {
                    return Err(Error::MatrixSqrt(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
                if j >= i {
                    comoment[i * f + j] = covariance[(i, j)] * (count - 1) as f64;
                }
            }
        }
        Ok(Self {
            mean,
            comoment,
            count,
        })
    }

    /// Rows of an `[N, F]` feature matrix, pushed in order.
    pub fn from_rows(features: &Tensor) -> Self {
        let [n, f] = features.shape() else {
            panic!("feature matrix must be [N, F], got {:?}", features.shape());
        };
        let mut s = Self::empty(*f);
        for i in 0..*n {
            s.push(&features.data()[i * f..(i + 1) * f]);
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn push(&mut self, x: &[f64]) {
        let f = self.dim();
        assert_eq!(x.len(), f, "feature dimension");
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        for (i, (xi, mi)) in x.iter().zip(&self.mean).enumerate() {
            let after = xi - mi;
            for (c, d) in self.comoment[i * f + i..(i + 1) * f]
                .iter_mut()
                .zip(&delta[i..])
            {
                *c += d * after;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        let f = self.dim();
        assert_eq!(other.dim(), f, "feature dimension");
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other
            .mean
            .iter()
            .zip(&self.mean)
            .map(|(b, a)| b - a)
            .collect();
        for i in 0..f {
            self.mean[i] += delta[i] * nb / n;
            for j in i..f {
                self.comoment[i * f + j] +=
                    other.comoment[i * f + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        self.count += other.count;
    }

    /// Sample covariance. A single sample has zero covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let f = self.dim();
        let denom = self.count.saturating_sub(1).max(1) as f64;
        DMatrix::from_fn(f, f, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.comoment[a * f + b] / denom
        })
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }
}

/// Probe statistics of `images`, accumulated in fixed chunks and merged
/// in order.
pub fn accumulate_statistics(
    images: &[&ImageTensor],
    probe: &PerceptualProbe,
    exec: Execution,
) -> Result<FeatureStatistics> {
    if images.len() < 2 {
        return Err(Error::TooFew {
            what: "images for feature statistics".into(),
            needed: 2,
            found: images.len(),
        });
    }
    let parts = exec.map_chunks(images, CHUNK, |_, chunk| {
        FeatureStatistics::from_rows(&probe.pooled_features(&ImageTensor::batch(chunk)))
    });
    let mut out = FeatureStatistics::empty(probe.feature_dim());
    for p in &parts {
        out.merge(p);
    }
    Ok(out)
}
