//! Fréchet distance between Gaussian fits of feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Ridge added to every fitted covariance.
pub const SHRINKAGE: f64 = 1e-6;
/// Eigenvalues above `−EIG_TOLERANCE` are clamped to zero; lower ones are rejected.
pub const EIG_TOLERANCE: f64 = 1e-6;

/// Mean and row-major covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianFit {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.len() != dim * dim {
            return Err(Error::ShapeMismatch {
                expected: vec![dim, dim],
                got: vec![cov.len()],
            });
        }
        Ok(Self { dim, mean, cov })
    }

    /// Sample mean and unbiased covariance plus `SHRINKAGE · I`.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::invalid("a Gaussian fit needs at least two samples"));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("feature vectors differ in length"));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64 + if i == j { SHRINKAGE } else { 0.0 };
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { dim: d, mean, cov })
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.cov)
    }
}

/// Eigenvalues of `(m + mᵀ)/2`, clamped per [`EIG_TOLERANCE`].
fn clamped_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    for l in e.eigenvalues.iter_mut() {
        if *l < -EIG_TOLERANCE {
            return Err(Error::Numerical(format!("{what} has eigenvalue {l:e}; not positive semidefinite")));
        }
        *l = l.max(0.0);
    }
    Ok(e)
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`, clamped at 0.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::ShapeMismatch {
            expected: vec![a.dim],
            got: vec![b.dim],
        });
    }
    let (s1, s2) = (a.matrix(), b.matrix());
    let e1 = clamped_eigen(s1.clone(), "first covariance")?;
    let root = DVector::from_iterator(a.dim, e1.eigenvalues.iter().map(|l| l.sqrt()));
    let s1_half = &e1.eigenvectors * DMatrix::from_diagonal(&root) * e1.eigenvectors.transpose();
    let inner = &s1_half * &s2 * &s1_half;
    let e = clamped_eigen(inner, "covariance product")?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let mean_sq: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((mean_sq + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_closed_form() {
        let a = GaussianFit::new(vec![0.0], vec![1.0]).unwrap();
        let b = GaussianFit::new(vec![1.0], vec![1.0]).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn commuting_diagonal() {
        let a = GaussianFit::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 4.0]).unwrap();
        let b = GaussianFit::new(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert!((frechet_distance(&b, &a).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let a = GaussianFit::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(matches!(frechet_distance(&a, &a), Err(Error::Numerical(_))));
    }

    #[test]
    fn fit_adds_shrinkage() {
        let f = GaussianFit::fit(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(f.cov, vec![SHRINKAGE, 0.0, 0.0, SHRINKAGE]);
        assert!(GaussianFit::fit(&[vec![1.0]]).is_err());
    }
}
