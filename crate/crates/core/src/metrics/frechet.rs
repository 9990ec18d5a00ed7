//! Fréchet distance between Gaussians.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)`, with the cross term evaluated as
/// `Tr((√Σ₁ Σ₂ √Σ₁)^½)`, which shares its eigenvalues.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let k = mu1.len();
    if mu2.len() != k || s1.shape() != (k, k) || s2.shape() != (k, k) {
        return Err(Error::Shape(format!(
            "Fréchet inputs disagree: μ {} / {}, Σ {:?} / {:?}",
            k,
            mu2.len(),
            s1.shape(),
            s2.shape()
        )));
    }
    let root1 = sqrtm_psd(s1);
    let inner = &root1 * s2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrtm_psd(&inner);
    // Clamping only discards round-off, so the residual must stay tiny.
    let scale = inner.norm().max(1.0);
    let residual = (&cross * &cross - &inner).norm() / scale;
    if residual > 1e-6 {
        return Err(Error::Numerical(format!("matrix square root residual {residual:.3e}")));
    }
    let diff = mu1 - mu2;
    let d = diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Mean and covariance (divisor `n − 1`) of the rows of `x`, plus `jitter·I`.
pub fn fit_gaussian(x: &DMatrix<f64>, jitter: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} rows cannot give a covariance")));
    }
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    for i in 0..cov.nrows() {
        cov[(i, i)] += jitter;
    }
    Ok((mu, cov))
}
