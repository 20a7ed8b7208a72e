//! Convex combination of several disaggregation fits.
//!
//! Weights solve `min ‖A w − y_l‖²` over the probability simplex, where
//! column `i` of `A` is member `i`'s low-frequency fit. For regression
//! members that column is the aggregated regression part `C·(Xβ̂)`: after
//! the distribution step every consistent member reproduces `y_l` exactly,
//! which would leave the weights undetermined. Other members contribute
//! `C·ŷ`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::conversion::{build_c, AggregationRule, ConversionError, ConversionMatrix};
use crate::frame::Frame;
use crate::linalg::{dvec, lu_solve};
use crate::models::{self, consistency_tolerance, FitOptions, FitResult, MethodId};

pub const DEFAULT_MEMBERS: [MethodId; 7] = [
    MethodId::Ols,
    MethodId::Denton,
    MethodId::Fernandez,
    MethodId::ChowLinOpt,
    MethodId::LittermanOpt,
    MethodId::Fast,
    MethodId::Uniform,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member")]
    EmptyMemberSet,
    #[error("every ensemble member failed to fit")]
    AllMembersFailed(Vec<(MethodId, String)>),
    #[error("non-finite entry in the weighting system")]
    NonFinite,
    #[error("missing data: {0}")]
    MissingData(String),
    #[error(transparent)]
    Conversion(#[from] ConversionError),
}

/// Lawson–Hanson active-set solver for `min ‖A x − b‖²` s.t. `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let atb = a.transpose() * b;
    let col_norm = (0..n).map(|j| a.column(j).lp_norm(1)).fold(0.0f64, f64::max);
    let tol = 10.0 * f64::EPSILON * col_norm * (a.nrows().max(n) as f64);
    let max_outer = 3 * n + 30;

    let mut w = atb.clone();
    for _ in 0..max_outer {
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = candidate else { break };
        passive[t] = true;

        loop {
            let z = passive_least_squares(a, b, &passive);
            let infeasible: Vec<usize> = (0..n).filter(|&j| passive[j] && z[j] <= 0.0).collect();
            if infeasible.is_empty() {
                x = z;
                break;
            }
            let alpha = infeasible
                .iter()
                .map(|&j| x[j] / (x[j] - z[j]))
                .fold(f64::INFINITY, f64::min);
            for j in 0..n {
                if passive[j] {
                    x[j] += alpha * (z[j] - x[j]);
                    if x[j] <= f64::EPSILON * 10.0 {
                        x[j] = 0.0;
                        passive[j] = false;
                    }
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w = a.transpose() * (b - a * &x);
    }
    x
}

fn passive_least_squares(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let sub = DMatrix::from_fn(a.nrows(), cols.len(), |i, k| a[(i, cols[k])]);
    let svd = sub.svd(true, true);
    let eps = 1e-14 * svd.singular_values.max();
    let sol = svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(cols.len()));
    let mut z = DVector::zeros(passive.len());
    for (k, &j) in cols.iter().enumerate() {
        z[j] = sol[k];
    }
    z
}

fn sse(a: &DMatrix<f64>, b: &DVector<f64>, w: &DVector<f64>) -> f64 {
    (a * w - b).norm_squared()
}

/// `argmin ‖A w − b‖²` over `{w ≥ 0, Σw = 1}`.
pub fn nnls_simplex(a: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    let m = a.ncols();
    if m == 0 {
        return Err(EnsembleError::EmptyMemberSet);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EnsembleError::NonFinite);
    }
    let b_vec = dvec(b);
    if m == 1 {
        return Ok(vec![1.0]);
    }

    // sum-to-one enforced as a heavily weighted extra row
    let lambda = 1e6 * (1.0 + b.iter().fold(0.0f64, |acc, v| acc.max(v.abs())));
    let rows = a.nrows();
    let mut aug = DMatrix::zeros(rows + 1, m);
    aug.view_mut((0, 0), (rows, m)).copy_from(a);
    aug.row_mut(rows).fill(lambda);
    let mut rhs = DVector::zeros(rows + 1);
    rhs.rows_mut(0, rows).copy_from(&b_vec);
    rhs[rows] = lambda;

    let raw = nnls(&aug, &rhs);
    let total: f64 = raw.sum();
    let mut w = if total > 0.0 { raw / total } else { DVector::from_element(m, 1.0 / m as f64) };
    let mut best = sse(a, &b_vec, &w);

    // exact equality-constrained solve on the support found above
    if let Some(polished) = polish_on_support(a, &b_vec, &w) {
        let obj = sse(a, &b_vec, &polished);
        if obj <= best {
            w = polished;
            best = obj;
        }
    }

    for j in 0..m {
        let vertex = DVector::from_fn(m, |i, _| if i == j { 1.0 } else { 0.0 });
        let obj = sse(a, &b_vec, &vertex);
        if obj < best {
            w = vertex;
            best = obj;
        }
    }
    Ok(w.as_slice().to_vec())
}

/// Solves `min ‖A_S v − b‖²` s.t. `Σv = 1` on the support S of `w` through
/// its KKT system. Returns `None` if singular or not strictly positive.
fn polish_on_support(a: &DMatrix<f64>, b: &DVector<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
    let k = support.len();
    if k == 0 {
        return None;
    }
    let sub = DMatrix::from_fn(a.nrows(), k, |i, c| a[(i, support[c])]);
    let gram = sub.transpose() * &sub;
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    kkt.view_mut((0, 0), (k, k)).copy_from(&gram);
    for i in 0..k {
        kkt[(i, k)] = 1.0;
        kkt[(k, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs.rows_mut(0, k).copy_from(&(sub.transpose() * b));
    rhs[k] = 1.0;
    // identical columns make the system singular; keep the NNLS answer then
    let cond_guard = gram.clone().svd(false, false);
    let sv = &cond_guard.singular_values;
    if sv.min() <= 1e-12 * sv.max() {
        return None;
    }
    let sol = lu_solve(kkt, &rhs)?;
    let v = sol.rows(0, k);
    if v.iter().any(|&x| x <= 0.0) {
        return None;
    }
    let mut out = DVector::zeros(w.len());
    for (c, &j) in support.iter().enumerate() {
        out[j] = v[c];
    }
    let total = out.sum();
    Some(out / total)
}

#[derive(Debug, Clone)]
pub struct Member {
    pub method: MethodId,
    pub fit: FitResult,
    pub weight: f64,
    /// Mean absolute error of `C·ŷ` against `y_l`.
    pub mae: f64,
    /// Root mean squared error of `C·ŷ` against `y_l`.
    pub rmse: f64,
    /// Squared error of this member's weighting column.
    pub column_sse: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub members: Vec<Member>,
    pub weights: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub y_l: Vec<f64>,
    pub cm: ConversionMatrix,
    /// `‖A w − y_l‖²` of the weighting problem.
    pub objective: f64,
    /// `‖C·ŷ − y_l‖²` of the combined prediction.
    pub aggregate_sse: f64,
    pub dropped: Vec<(MethodId, String)>,
}

fn weighting_column(fit: &FitResult, cm: &ConversionMatrix) -> Vec<f64> {
    let source = fit.regression_fit.as_ref().unwrap_or(&fit.y_hat);
    cm.aggregate(source).expect("member output has length n")
}

/// Fits each member on the same data and combines them.
pub fn run_ensemble_on(
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    methods: &[MethodId],
    opts: &FitOptions,
) -> Result<EnsembleResult, EnsembleError> {
    if methods.is_empty() {
        return Err(EnsembleError::EmptyMemberSet);
    }
    let outcomes: Vec<(MethodId, Result<FitResult, models::ModelError>)> =
        methods.par_iter().map(|&m| (m, models::fit(m, y_l, x, cm, opts))).collect();

    let mut fits = Vec::new();
    let mut dropped = Vec::new();
    for (method, outcome) in outcomes {
        match outcome {
            Ok(fit) if fit.y_hat.iter().all(|v| v.is_finite()) => fits.push((method, fit)),
            Ok(_) => {
                warn!("ensemble member {method} produced non-finite values; dropped");
                dropped.push((method, "non-finite prediction".to_string()));
            }
            Err(err) => {
                warn!("ensemble member {method} failed: {err}; dropped");
                dropped.push((method, err.to_string()));
            }
        }
    }
    if fits.is_empty() {
        return Err(EnsembleError::AllMembersFailed(dropped));
    }

    let columns: Vec<Vec<f64>> = fits.iter().map(|(_, f)| weighting_column(f, cm)).collect();
    let a = DMatrix::from_fn(cm.n_low(), fits.len(), |i, j| columns[j][i]);
    let weights = nnls_simplex(&a, y_l)?;

    let n = cm.n_high();
    let mut y_hat = vec![0.0; n];
    for ((_, fit), w) in fits.iter().zip(&weights) {
        for (acc, v) in y_hat.iter_mut().zip(&fit.y_hat) {
            *acc += w * v;
        }
    }
    let b = dvec(y_l);
    let objective = sse(&a, &b, &dvec(&weights));
    let aggregated = cm.aggregate(&y_hat)?;
    let aggregate_sse = aggregated.iter().zip(y_l).map(|(p, t)| (p - t).powi(2)).sum();

    let n_l = y_l.len() as f64;
    let members = fits
        .into_iter()
        .zip(&weights)
        .zip(&columns)
        .map(|(((method, fit), &weight), column)| {
            let agg = cm.aggregate(&fit.y_hat).expect("length n");
            let errors: Vec<f64> = agg.iter().zip(y_l).map(|(p, t)| p - t).collect();
            let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n_l;
            let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n_l).sqrt();
            let column_sse = column.iter().zip(y_l).map(|(p, t)| (p - t).powi(2)).sum();
            Member { method, fit, weight, mae, rmse, column_sse }
        })
        .collect();

    Ok(EnsembleResult {
        members,
        weights,
        y_hat,
        y_l: y_l.to_vec(),
        cm: cm.clone(),
        objective,
        aggregate_sse,
        dropped,
    })
}

/// Runs the ensemble on a complete frame with every group target present.
pub fn run_ensemble(
    frame: &Frame,
    rule: AggregationRule,
    methods: &[MethodId],
    opts: &FitOptions,
) -> Result<EnsembleResult, EnsembleError> {
    let cm = build_c(frame, rule)?;
    let y_l: Vec<f64> = frame
        .group_targets()
        .into_iter()
        .collect::<Option<_>>()
        .ok_or_else(|| EnsembleError::MissingData("some groups have no target y".into()))?;
    let x = frame.x_complete().ok_or_else(|| EnsembleError::MissingData("indicator X has gaps".into()))?;
    run_ensemble_on(&y_l, &x, &cm, methods, opts)
}

/// Wraps the combined prediction as a plain fit result.
pub fn to_model(er: &EnsembleResult) -> FitResult {
    let mut fit = FitResult::bare(MethodId::Ensemble, er.y_hat.clone(), false);
    fit.aggregation_consistent = fit.consistency_gap(&er.y_l, &er.cm) <= consistency_tolerance(&er.y_l);
    fit
}
