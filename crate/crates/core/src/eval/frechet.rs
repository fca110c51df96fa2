use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

use super::FeatureVector;

/// Covariance estimate used by [`frechet_proxy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CovarianceMode {
    #[default]
    Full,
    /// Per-coordinate variances only.
    Diagonal,
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(features: &[FeatureVector]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(Error::invalid(format!(
            "a Gaussian fit needs at least 2 feature vectors, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("feature vectors differ in length"));
    }
    let n = features.len() as f64;
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f.as_slice());
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f.as_slice()) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

/// Eigenvalues below the numerical-rank tolerance count as zero.
fn clamp(values: &DVector<f64>) -> DVector<f64> {
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = values.len() as f64 * f64::EPSILON * max;
    values.map(|v| if v > tol { v } else { 0.0 })
}

/// Square root of a symmetric positive semi-definite matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = clamp(&eig.eigenvalues).map(f64::sqrt);
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `tr((Σa Σb)^{1/2})`, computed through the symmetric matrix
/// `Σa^{1/2} Σb Σa^{1/2}`, which has the same eigenvalues.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(a);
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    clamp(&SymmetricEigen::new(sym).eigenvalues)
        .iter()
        .map(|v| v.sqrt())
        .sum()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_proxy(a: &[FeatureVector], b: &[FeatureVector], mode: CovarianceMode) -> Result<f64> {
    let (mu_a, cov_a) = fit_gaussian(a)?;
    let (mu_b, cov_b) = fit_gaussian(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::invalid("feature sets differ in dimension"));
    }
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let cov_term = match mode {
        CovarianceMode::Full => {
            cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(&cov_a, &cov_b)
        }
        CovarianceMode::Diagonal => cov_a
            .diagonal()
            .iter()
            .zip(cov_b.diagonal().iter())
            .map(|(&x, &y)| x + y - 2.0 * (x.max(0.0) * y.max(0.0)).sqrt())
            .sum(),
    };
    Ok((mean_term + cov_term).max(0.0))
}
