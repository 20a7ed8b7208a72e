//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Condition estimate above which a ridge is added before factoring.
pub const MAX_CONDITION: f64 = 1e12;
const RIDGE_SCALE: f64 = 1e-10;

/// Cholesky factor of a symmetric positive-definite matrix, possibly after
/// a small diagonal ridge.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub ridged: bool,
}

impl SpdFactor {
    /// Factors `a`. If the factorization fails or the condition estimate
    /// exceeds [`MAX_CONDITION`], retries with a ridge of
    /// `1e-10 * mean(diag a)`. Returns `None` when both attempts fail.
    pub fn new(a: &DMatrix<f64>) -> Option<SpdFactor> {
        if let Some(chol) = Cholesky::new(a.clone()) {
            if condition_estimate(&chol) <= MAX_CONDITION {
                return Some(SpdFactor { chol, ridged: false });
            }
        }
        let n = a.nrows();
        if n == 0 {
            return None;
        }
        let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
        if !(mean_diag.is_finite() && mean_diag > 0.0) {
            return None;
        }
        let mut ridged = a.clone();
        for i in 0..n {
            ridged[(i, i)] += RIDGE_SCALE * mean_diag;
        }
        Cholesky::new(ridged).map(|chol| SpdFactor { chol, ridged: true })
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Squared ratio of the extreme Cholesky pivots; a cheap lower bound on the
/// 2-norm condition number.
fn condition_estimate(chol: &Cholesky<f64, Dyn>) -> f64 {
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().cloned().fold(0.0f64, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return f64::INFINITY;
    }
    (max / min).powi(2)
}

/// True when a small symmetric Gram matrix has a smallest eigenvalue
/// negligible relative to its largest.
pub fn is_rank_deficient(gram: &DMatrix<f64>) -> bool {
    if gram.iter().any(|v| !v.is_finite()) {
        return true;
    }
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min <= 1e-12 * max
}

/// Solves a square system by LU with partial pivoting.
pub fn lu_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let x = a.lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Column vector helper.
pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}
