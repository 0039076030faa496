use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};

use super::stats::FeatureStatistics;
use crate::error::{Error, Result};

/// Negative residue beyond this is reported before clamping.
const RESIDUE_WARN: f64 = 1e-6;
const MAX_SWEEPS: usize = 10_000;

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let diag = m.diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
        (lo.min(v.abs()), hi.max(v.abs()))
    });
    let n = m.nrows();
    SymmetricEigen::try_new(m, f64::EPSILON, MAX_SWEEPS).ok_or_else(|| {
        Error::MatrixSqrt(format!(
            "{what}: eigendecomposition of a {n}x{n} matrix did not converge \
             (diagonal magnitude range {lo:.3e}..{hi:.3e}, ratio {:.3e})",
            hi / lo.max(f64::MIN_POSITIVE)
        ))
    })
}

fn clamped(values: &[f64], what: &str) -> Vec<f64> {
    let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    values
        .iter()
        .map(|&v| {
            if v < -RESIDUE_WARN * scale {
                warn!("{what}: clamping negative eigenvalue {v:.3e}");
            }
            v.max(0.0)
        })
        .collect()
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of the product root is taken as the trace of the root of
/// `S1^(1/2) S2 S1^(1/2)`, which has the same eigenvalues and is symmetric.
pub fn frechet_distance(s1: &FeatureStatistics, s2: &FeatureStatistics) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::shape("feature dimension", s1.dim(), s2.dim()));
    }
    let c1 = sym(s1.covariance());
    let c2 = sym(s2.covariance());
    let e1 = eigen(c1.clone(), "first covariance")?;
    let roots: Vec<f64> = clamped(e1.eigenvalues.as_slice(), "first covariance")
        .iter()
        .map(|v| v.sqrt())
        .collect();
    let v = &e1.eigenvectors;
    let root1 = v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(roots)) * v.transpose();
    let m = sym(&root1 * &c2 * &root1);
    let em = eigen(m, "covariance product")?;
    let tr_root: f64 = clamped(em.eigenvalues.as_slice(), "covariance product")
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let dmu = (s1.mean_vector() - s2.mean_vector()).norm_squared();
    let d = dmu + c1.trace() + c2.trace() - 2.0 * tr_root;
    if d < -RESIDUE_WARN {
        warn!("Fréchet distance residue {d:.3e} clamped to zero");
    }
    Ok(d.max(0.0))
}
