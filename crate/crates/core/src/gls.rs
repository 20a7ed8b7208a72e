//! Generalized least squares on the low-frequency system and the
//! distribution step shared by the regression-based methods.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::conversion::ConversionMatrix;
use crate::linalg::{dvec, is_rank_deficient, SpdFactor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlsError {
    #[error("low-frequency covariance V is singular")]
    SingularV,
    #[error("design matrix is rank deficient")]
    RankDeficient,
}

/// High-frequency design: optional intercept column followed by `x`.
pub fn design(x: &[f64], intercept: bool) -> DMatrix<f64> {
    let n = x.len();
    if intercept {
        DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] })
    } else {
        DMatrix::from_column_slice(n, 1, x)
    }
}

pub struct GlsFit {
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `V⁻¹ u`
    pub weighted_residuals: DVector<f64>,
    /// `uᵀ V⁻¹ u`
    pub rss: f64,
    pub ln_det_v: f64,
    /// `(X_lᵀ V⁻¹ X_l)⁻¹`, unscaled.
    pub gram_inverse: DMatrix<f64>,
    pub n_low: usize,
    pub ridged: bool,
}

impl GlsFit {
    pub fn dof(&self) -> usize {
        self.n_low.saturating_sub(self.beta.len())
    }

    /// Degrees-of-freedom corrected residual variance.
    pub fn sigma2(&self) -> Option<f64> {
        let dof = self.dof();
        (dof >= 1).then(|| self.rss / dof as f64)
    }

    pub fn vcov(&self) -> Option<DMatrix<f64>> {
        self.sigma2().map(|s2| &self.gram_inverse * s2)
    }

    /// Profile (concentrated) Gaussian log-likelihood with
    /// `σ² = uᵀV⁻¹u / n_l`.
    pub fn log_likelihood(&self) -> f64 {
        let n = self.n_low as f64;
        let sigma2 = (self.rss / n).max(f64::MIN_POSITIVE);
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + n * sigma2.ln() + self.ln_det_v + n)
    }
}

/// `β̂ = (X_lᵀV⁻¹X_l)⁻¹ X_lᵀV⁻¹ y_l`.
pub fn gls(y_l: &DVector<f64>, x_l: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<GlsFit, GlsError> {
    let factor = SpdFactor::new(v).ok_or(GlsError::SingularV)?;
    let vinv_x = factor.solve(x_l);
    let gram = x_l.transpose() * &vinv_x;
    if is_rank_deficient(&gram) {
        return Err(GlsError::RankDeficient);
    }
    let gram_inverse = gram.clone().try_inverse().ok_or(GlsError::RankDeficient)?;
    let rhs = vinv_x.transpose() * y_l;
    let beta = &gram_inverse * rhs;
    let residuals = y_l - x_l * &beta;
    let weighted_residuals = factor.solve_vec(&residuals);
    let rss = residuals.dot(&weighted_residuals).max(0.0);
    Ok(GlsFit {
        beta,
        residuals,
        weighted_residuals,
        rss,
        ln_det_v: factor.ln_det(),
        gram_inverse,
        n_low: y_l.len(),
        ridged: factor.ridged,
    })
}

pub struct Distributed {
    pub fit: GlsFit,
    pub y_hat: Vec<f64>,
    pub regression_fit: Vec<f64>,
    pub v: DMatrix<f64>,
}

/// GLS under `V = C Q Cᵀ` followed by `ŷ = Xβ̂ + Q Cᵀ V⁻¹ (y_l − X_l β̂)`.
pub fn gls_distribute(
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    q: &DMatrix<f64>,
    intercept: bool,
) -> Result<Distributed, GlsError> {
    let design = design(x, intercept);
    let x_l = cm.aggregate_columns(&design);
    let (qct, v) = cm.project_covariance(q);
    let fit = gls(&dvec(y_l), &x_l, &v)?;
    let regression = &design * &fit.beta;
    let y_hat = &regression + qct * &fit.weighted_residuals;
    Ok(Distributed {
        fit,
        y_hat: y_hat.as_slice().to_vec(),
        regression_fit: regression.as_slice().to_vec(),
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversion::AggregationRule;

    #[test]
    fn identity_covariance_reduces_to_ols() {
        let x_l = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = dvec(&[1.0, 3.0, 2.0]);
        let fit = gls(&y, &x_l, &DMatrix::identity(3, 3)).unwrap();
        // normal equations by hand: [[3,6],[6,14]] b = [6,13]
        assert!((fit.beta[0] - 1.0).abs() < 1e-12);
        assert!((fit.beta[1] - 0.5).abs() < 1e-12);
        assert!((fit.rss - 1.5).abs() < 1e-12);
        assert_eq!(fit.dof(), 1);
    }

    #[test]
    fn distribution_restores_aggregates() {
        let cm = ConversionMatrix::regular(3, 2, AggregationRule::Sum).unwrap();
        let x = [1.0, 2.0, 4.0, 3.0, 5.0, 8.0];
        let y_l = [4.0, 6.0, 20.0];
        let q = DMatrix::identity(6, 6);
        let out = gls_distribute(&y_l, &x, &cm, &q, false).unwrap();
        let agg = cm.aggregate(&out.y_hat).unwrap();
        for (a, b) in agg.iter().zip(y_l) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_design_rejected() {
        let cm = ConversionMatrix::regular(3, 2, AggregationRule::Sum).unwrap();
        let x = [2.0; 6];
        let err = gls_distribute(&[1.0, 2.0, 3.0], &x, &cm, &DMatrix::identity(6, 6), true);
        assert!(matches!(err, Err(GlsError::RankDeficient)));
    }
}
