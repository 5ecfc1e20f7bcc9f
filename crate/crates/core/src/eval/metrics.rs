//! Identity similarity and feature-distribution distances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::identity::Recognizer;
use crate::tensor::Tensor;

/// Added to both covariances when either sample has at most `D` rows.
pub const COV_SHRINKAGE: f64 = 1e-6;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine of the evaluation recognizer's embeddings of two images.
pub fn identity_similarity(a: &Tensor, b: &Tensor, rec: &Recognizer) -> Result<f64> {
    let e = rec.embed(&[a, b])?;
    cosine(e.row(0), e.row(1))
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::shape("features", format!("expected M×D, got {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.rows(), t.cols(), t.data()))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (n - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, via the symmetric form
/// `Tr((√Σ_a Σ_b √Σ_a)^{1/2})`.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (xa, xb) = (to_matrix(a)?, to_matrix(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::shape("frechet_distance", format!("widths {} vs {}", xa.ncols(), xb.ncols())));
    }
    if xa.nrows() < 2 || xb.nrows() < 2 {
        return Err(Error::Invalid("frechet_distance needs at least 2 samples per side".into()));
    }
    let d = xa.ncols();
    let (mu_a, mut ca) = mean_cov(&xa);
    let (mu_b, mut cb) = mean_cov(&xb);
    if xa.nrows() <= d || xb.nrows() <= d {
        ca += DMatrix::identity(d, d) * COV_SHRINKAGE;
        cb += DMatrix::identity(d, d) * COV_SHRINKAGE;
    }
    let sa = psd_sqrt(&ca);
    let cross = psd_sqrt(&(&sa * &cb * &sa)).trace();
    let diff = mu_a - mu_b;
    Ok((diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD under the cubic polynomial kernel.
pub fn kid_mmd(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("kid_mmd", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (m, n) = (a.rows(), b.rows());
    if m < 2 || n < 2 {
        return Err(Error::Invalid("kid_mmd needs at least 2 samples per side".into()));
    }
    let within = |x: &Tensor, k: usize| {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += poly_kernel(x.row(i), x.row(j));
                }
            }
        }
        s / (k * (k - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            cross += poly_kernel(a.row(i), b.row(j));
        }
    }
    Ok(within(a, m) + within(b, n) - 2.0 * cross / (m * n) as f64)
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = 0.5f64.sqrt();
        assert!((cosine(&[s, s], &[1.0, 0.0]).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn kid_hand_case() {
        let a = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert!((kid_mmd(&a, &b).unwrap() - 7.0).abs() < 1e-10);
        assert_eq!(poly_kernel(&[0.0], &[0.0]), 1.0);
    }

    #[test]
    fn frechet_requires_samples() {
        let a = Tensor::zeros(&[1, 2]);
        assert!(frechet_distance(&a, &a).is_err());
    }
}
