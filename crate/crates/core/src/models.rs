//! Disaggregation methods behind one `fit` entry point.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::conversion::ConversionMatrix;
use crate::gls::{design, gls, gls_distribute, GlsError};
use crate::linalg::{dvec, lu_solve, max_abs, SpdFactor};
use crate::rho::{self, build_q, inference, Inference, PowerMatrix, QBuilder, RhoError, RhoObjective};

pub const ECOTRIM_RHO: f64 = 0.75;
pub const QUILIS_RHO: f64 = 0.15;
pub const FAST_RHO: f64 = 0.9;
/// Used by `chow-lin` and `litterman` when no ρ is supplied.
pub const DEFAULT_RHO: f64 = 0.5;
const DENTON_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("low-frequency covariance V is singular")]
    SingularV,
    #[error("linear system is singular")]
    SingularSystem,
    #[error("length mismatch: {what} has length {found}, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("`{0}` is not a single disaggregation method")]
    NotASingleMethod(MethodId),
    #[error(transparent)]
    Rho(#[from] RhoError),
}

impl From<GlsError> for ModelError {
    fn from(e: GlsError) -> Self {
        match e {
            GlsError::SingularV => ModelError::SingularV,
            GlsError::RankDeficient => ModelError::RankDeficient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodId {
    Ols,
    Denton,
    DentonCholette,
    ChowLin,
    ChowLinOpt,
    ChowLinEcotrim,
    ChowLinQuilis,
    Litterman,
    LittermanOpt,
    Fernandez,
    Fast,
    Uniform,
    /// Label for exported ensemble predictions; not fittable on its own.
    Ensemble,
}

impl MethodId {
    pub const ALL: [MethodId; 12] = [
        MethodId::Ols,
        MethodId::Denton,
        MethodId::DentonCholette,
        MethodId::ChowLin,
        MethodId::ChowLinOpt,
        MethodId::ChowLinEcotrim,
        MethodId::ChowLinQuilis,
        MethodId::Litterman,
        MethodId::LittermanOpt,
        MethodId::Fernandez,
        MethodId::Fast,
        MethodId::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Ols => "ols",
            MethodId::Denton => "denton",
            MethodId::DentonCholette => "denton-cholette",
            MethodId::ChowLin => "chow-lin",
            MethodId::ChowLinOpt => "chow-lin-opt",
            MethodId::ChowLinEcotrim => "chow-lin-ecotrim",
            MethodId::ChowLinQuilis => "chow-lin-quilis",
            MethodId::Litterman => "litterman",
            MethodId::LittermanOpt => "litterman-opt",
            MethodId::Fernandez => "fernandez",
            MethodId::Fast => "fast",
            MethodId::Uniform => "uniform",
            MethodId::Ensemble => "ensemble",
        }
    }

    /// Methods that regress `y_l` on the aggregated indicator.
    pub fn is_regression(self) -> bool {
        !matches!(
            self,
            MethodId::Denton | MethodId::DentonCholette | MethodId::Uniform | MethodId::Ensemble
        )
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        MethodId::ALL
            .iter()
            .copied()
            .find(|m| m.name() == lower)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// `None` uses the method default (on for regression methods).
    pub intercept: Option<bool>,
    /// Fixed ρ for `chow-lin` / `litterman`.
    pub rho: Option<f64>,
    /// Differencing order for `denton`.
    pub denton_h: usize,
    /// Optional per-period weights for `denton-cholette`.
    pub weights: Option<Vec<f64>>,
    /// Objective override for the `-opt` methods.
    pub rho_objective: Option<RhoObjective>,
    pub rho_bounds: (f64, f64),
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            intercept: None,
            rho: None,
            denton_h: 1,
            weights: None,
            rho_objective: None,
            rho_bounds: rho::DEFAULT_BOUNDS,
        }
    }
}

impl FitOptions {
    pub fn without_intercept() -> Self {
        FitOptions { intercept: Some(false), ..Default::default() }
    }

    fn intercept(&self) -> bool {
        self.intercept.unwrap_or(true)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: MethodId,
    pub y_hat: Vec<f64>,
    /// `[intercept, slope]` or `[slope]`.
    pub beta: Option<Vec<f64>>,
    pub intercept: bool,
    pub rho: Option<f64>,
    /// `u = y_l − X_l β̂`.
    pub residuals_low: Option<Vec<f64>>,
    /// `X β̂` before the distribution step.
    pub regression_fit: Option<Vec<f64>>,
    pub q: Option<DMatrix<f64>>,
    pub v: Option<DMatrix<f64>>,
    pub vcov: Option<DMatrix<f64>>,
    pub sigma2: Option<f64>,
    pub inference: Option<Inference>,
    pub log_likelihood: Option<f64>,
    /// `(ρ, objective)` pairs for optimized-ρ methods.
    pub rho_trace: Option<Vec<(f64, f64)>>,
    pub aggregation_consistent: bool,
}

impl FitResult {
    pub(crate) fn bare(method: MethodId, y_hat: Vec<f64>, aggregation_consistent: bool) -> Self {
        FitResult {
            method,
            y_hat,
            beta: None,
            intercept: false,
            rho: None,
            residuals_low: None,
            regression_fit: None,
            q: None,
            v: None,
            vcov: None,
            sigma2: None,
            inference: None,
            log_likelihood: None,
            rho_trace: None,
            aggregation_consistent,
        }
    }

    pub fn coefficient_names(&self) -> Vec<&'static str> {
        if self.intercept {
            vec!["intercept", "X"]
        } else {
            vec!["X"]
        }
    }

    /// `‖C·ŷ − y_l‖∞`.
    pub fn consistency_gap(&self, y_l: &[f64], cm: &ConversionMatrix) -> f64 {
        match cm.aggregate(&self.y_hat) {
            Ok(agg) => max_abs(agg.iter().zip(y_l).map(|(a, b)| a - b)),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Tolerance used for aggregation-consistency checks.
pub fn consistency_tolerance(y_l: &[f64]) -> f64 {
    1e-6 * (1.0 + max_abs(y_l.iter().copied()))
}

fn check_inputs(y_l: &[f64], x: Option<&[f64]>, cm: &ConversionMatrix) -> Result<(), ModelError> {
    if y_l.len() != cm.n_low() {
        return Err(ModelError::LengthMismatch { what: "y_l", expected: cm.n_low(), found: y_l.len() });
    }
    if y_l.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("y_l"));
    }
    if let Some(x) = x {
        if x.len() != cm.n_high() {
            return Err(ModelError::LengthMismatch { what: "X", expected: cm.n_high(), found: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("X"));
        }
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<(), ModelError> {
    if rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(RhoError::RhoOutOfRange(rho).into())
    }
}

/// Dispatches to the method's fitting routine.
pub fn fit(
    method: MethodId,
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    opts: &FitOptions,
) -> Result<FitResult, ModelError> {
    let intercept = opts.intercept();
    match method {
        MethodId::Ols => fit_ols(y_l, x, cm, intercept),
        MethodId::Uniform => fit_uniform(y_l, cm),
        MethodId::Denton => fit_denton(y_l, cm, opts.denton_h),
        MethodId::DentonCholette => fit_denton_cholette(y_l, x, cm, opts.weights.as_deref()),
        MethodId::ChowLin => fit_chow_lin(y_l, x, cm, opts.rho.unwrap_or(DEFAULT_RHO), intercept),
        MethodId::ChowLinEcotrim => fit_chow_lin_ecotrim(y_l, x, cm, intercept),
        MethodId::ChowLinQuilis => fit_chow_lin_quilis(y_l, x, cm, intercept),
        MethodId::ChowLinOpt => fit_chow_lin_opt(
            y_l,
            x,
            cm,
            opts.rho_objective.unwrap_or(RhoObjective::MaxLog),
            opts.rho_bounds,
            intercept,
        ),
        MethodId::Litterman => fit_litterman(y_l, x, cm, opts.rho.unwrap_or(DEFAULT_RHO), intercept),
        MethodId::LittermanOpt => fit_litterman_opt(
            y_l,
            x,
            cm,
            opts.rho_objective.unwrap_or(RhoObjective::MinRss),
            opts.rho_bounds,
            intercept,
        ),
        MethodId::Fernandez => fit_fernandez(y_l, x, cm, intercept),
        MethodId::Fast => fit_fast(y_l, x, cm, intercept),
        MethodId::Ensemble => Err(ModelError::NotASingleMethod(method)),
    }
}

/// `β̂ = (X_lᵀX_l)⁻¹X_lᵀy_l`, `ŷ = Xβ̂`; no distribution step.
pub fn fit_ols(y_l: &[f64], x: &[f64], cm: &ConversionMatrix, intercept: bool) -> Result<FitResult, ModelError> {
    check_inputs(y_l, Some(x), cm)?;
    let design = design(x, intercept);
    let x_l = cm.aggregate_columns(&design);
    let identity = DMatrix::identity(cm.n_low(), cm.n_low());
    let fit = gls(&dvec(y_l), &x_l, &identity)?;
    let y_hat = (&design * &fit.beta).as_slice().to_vec();
    let beta = fit.beta.as_slice().to_vec();
    let vcov = fit.vcov();
    let inference = vcov.as_ref().and_then(|vc| inference(&beta, vc, fit.dof()).ok());
    Ok(FitResult {
        beta: Some(beta),
        intercept,
        residuals_low: Some(fit.residuals.as_slice().to_vec()),
        regression_fit: Some(y_hat.clone()),
        sigma2: fit.sigma2(),
        vcov,
        inference,
        log_likelihood: Some(fit.log_likelihood()),
        ..FitResult::bare(MethodId::Ols, y_hat, false)
    })
}

/// Minimum-norm solution `ŷ = Cᵀ(CCᵀ)⁻¹y_l`; the indicator is ignored.
pub fn fit_uniform(y_l: &[f64], cm: &ConversionMatrix) -> Result<FitResult, ModelError> {
    check_inputs(y_l, None, cm)?;
    let c = cm.matrix();
    let mut y_hat = vec![0.0; cm.n_high()];
    // CCᵀ is diagonal since group spans are disjoint
    for (g, span) in cm.spans().iter().enumerate() {
        let norm2: f64 = span.range().map(|i| c[(g, i)] * c[(g, i)]).sum();
        for i in span.range() {
            y_hat[i] = c[(g, i)] * y_l[g] / norm2;
        }
    }
    Ok(FitResult::bare(MethodId::Uniform, y_hat, true))
}

/// `(n − h) x n` matrix of order-`h` differences.
pub fn difference_matrix(n: usize, h: usize) -> DMatrix<f64> {
    let mut d = DMatrix::identity(n, n);
    for order in 0..h {
        let rows = n - order;
        let mut step = DMatrix::zeros(rows - 1, rows);
        for i in 0..rows - 1 {
            step[(i, i)] = -1.0;
            step[(i, i + 1)] = 1.0;
        }
        d = step * d;
    }
    d
}

/// Solves `min yᵀ P y` s.t. `C y = b` through the KKT system
/// `[P  Cᵀ; C  0] [y; λ] = [0; b]`.
fn solve_penalized(p: &DMatrix<f64>, cm: &ConversionMatrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = cm.n_high();
    let n_l = cm.n_low();
    let c = cm.matrix();
    let mut kkt = DMatrix::zeros(n + n_l, n + n_l);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    kkt.view_mut((0, n), (n, n_l)).copy_from(&c.transpose());
    kkt.view_mut((n, 0), (n_l, n)).copy_from(c);
    let mut rhs = DVector::zeros(n + n_l);
    rhs.rows_mut(n, n_l).copy_from_slice(b);
    let sol = lu_solve(kkt, &rhs)?;
    Some(sol.rows(0, n).as_slice().to_vec())
}

/// Smooth distribution of `y_l` penalizing order-`h` differences; X unused.
pub fn fit_denton(y_l: &[f64], cm: &ConversionMatrix, h: usize) -> Result<FitResult, ModelError> {
    check_inputs(y_l, None, cm)?;
    let n = cm.n_high();
    if h < 1 {
        return Err(ModelError::InvalidOption(format!("denton order h must be >= 1, got {h}")));
    }
    if h >= n {
        return Err(ModelError::InvalidOption(format!("denton order h={h} needs more than {n} periods")));
    }
    let d = difference_matrix(n, h);
    let mut penalty = d.transpose() * d;
    let eps = DENTON_EPS * penalty.trace() / n as f64;
    for i in 0..n {
        penalty[(i, i)] += eps;
    }
    let y_hat = solve_penalized(&penalty, cm, y_l).ok_or(ModelError::SingularSystem)?;
    let q = SpdFactor::new(&penalty).map(|f| f.inverse());
    let v = q.as_ref().map(|q| cm.project_covariance(q).1);
    Ok(FitResult { q, v, ..FitResult::bare(MethodId::Denton, y_hat, true) })
}

/// Adjusts the indicator as a base series: `ŷ = X + δ` with δ the smallest
/// first-difference-penalized correction meeting `C(X + δ) = y_l`.
pub fn fit_denton_cholette(
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    weights: Option<&[f64]>,
) -> Result<FitResult, ModelError> {
    check_inputs(y_l, Some(x), cm)?;
    let n = cm.n_high();
    let mut penalty = if n > 1 {
        let d = difference_matrix(n, 1);
        d.transpose() * d
    } else {
        DMatrix::zeros(n, n)
    };
    if let Some(w) = weights {
        if w.len() != n {
            return Err(ModelError::LengthMismatch { what: "weights", expected: n, found: w.len() });
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(ModelError::InvalidOption("weights must be positive and finite".into()));
        }
        for (i, wi) in w.iter().enumerate() {
            penalty[(i, i)] += wi;
        }
    }
    let discrepancy: Vec<f64> =
        cm.aggregate(x).expect("length checked").iter().zip(y_l).map(|(cx, y)| y - cx).collect();
    let delta = solve_penalized(&penalty, cm, &discrepancy).ok_or(ModelError::SingularSystem)?;
    let y_hat: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
    let q = SpdFactor::new(&penalty).filter(|f| !f.ridged).map(|f| f.inverse());
    let v = q.as_ref().map(|q| cm.project_covariance(q).1);
    Ok(FitResult { q, v, ..FitResult::bare(MethodId::DentonCholette, y_hat, true) })
}

fn fit_with_q(
    method: MethodId,
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    q: DMatrix<f64>,
    rho: f64,
    intercept: bool,
) -> Result<FitResult, ModelError> {
    let out = gls_distribute(y_l, x, cm, &q, intercept)?;
    let beta = out.fit.beta.as_slice().to_vec();
    let vcov = out.fit.vcov();
    let inference = vcov.as_ref().and_then(|vc| inference(&beta, vc, out.fit.dof()).ok());
    Ok(FitResult {
        beta: Some(beta),
        intercept,
        rho: Some(rho),
        residuals_low: Some(out.fit.residuals.as_slice().to_vec()),
        regression_fit: Some(out.regression_fit),
        q: Some(q),
        v: Some(out.v),
        sigma2: out.fit.sigma2(),
        vcov,
        inference,
        log_likelihood: Some(out.fit.log_likelihood()),
        ..FitResult::bare(method, out.y_hat, true)
    })
}

fn chow_lin_as(
    method: MethodId,
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    rho: f64,
    intercept: bool,
) -> Result<FitResult, ModelError> {
    check_inputs(y_l, Some(x), cm)?;
    check_rho(rho)?;
    let q = build_q(rho, &PowerMatrix::new(x.len()), QBuilder::ChowLin)?;
    fit_with_q(method, y_l, x, cm, q, rho, intercept)
}

fn litterman_as(
    method: MethodId,
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    rho: f64,
    intercept: bool,
) -> Result<FitResult, ModelError> {
    check_inputs(y_l, Some(x), cm)?;
    check_rho(rho)?;
    let q = build_q(rho, &PowerMatrix::new(x.len()), QBuilder::Litterman)?;
    fit_with_q(method, y_l, x, cm, q, rho, intercept)
}

/// Regression with AR(1) residuals at a fixed ρ.
pub fn fit_chow_lin(
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    rho: f64,
    intercept: bool,
) -> Result<FitResult, ModelError> {
    chow_lin_as(MethodId::ChowLin, y_l, x, cm, rho, intercept)
}

pub fn fit_chow_lin_ecotrim(y_l: &[f64], x: &[f64], cm: &ConversionMatrix, intercept: bool) -> Result<FitResult, ModelError> {
    chow_lin_as(MethodId::ChowLinEcotrim, y_l, x, cm, ECOTRIM_RHO, intercept)
}

pub fn fit_chow_lin_quilis(y_l: &[f64], x: &[f64], cm: &ConversionMatrix, intercept: bool) -> Result<FitResult, ModelError> {
    chow_lin_as(MethodId::ChowLinQuilis, y_l, x, cm, QUILIS_RHO, intercept)
}

pub fn fit_chow_lin_opt(
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    objective: RhoObjective,
    bounds: (f64, f64),
    intercept: bool,
) -> Result<FitResult, ModelError> {
    check_inputs(y_l, Some(x), cm)?;
    let found = rho::optimize(y_l, x, cm, objective, QBuilder::ChowLin, bounds, intercept)?;
    let mut result = chow_lin_as(MethodId::ChowLinOpt, y_l, x, cm, found.rho_hat, intercept)?;
    result.rho_trace = Some(found.objective_trace);
    Ok(result)
}

/// GLS with the prior `Q = (Dᵀ H_ρᵀ H_ρ D)⁻¹`.
pub fn fit_litterman(
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    rho: f64,
    intercept: bool,
) -> Result<FitResult, ModelError> {
    litterman_as(MethodId::Litterman, y_l, x, cm, rho, intercept)
}

pub fn fit_litterman_opt(
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    objective: RhoObjective,
    bounds: (f64, f64),
    intercept: bool,
) -> Result<FitResult, ModelError> {
    check_inputs(y_l, Some(x), cm)?;
    let found = rho::optimize(y_l, x, cm, objective, QBuilder::Litterman, bounds, intercept)?;
    let mut result = litterman_as(MethodId::LittermanOpt, y_l, x, cm, found.rho_hat, intercept)?;
    result.rho_trace = Some(found.objective_trace);
    Ok(result)
}

/// Random-walk prior `Q = (DᵀD)⁻¹`, i.e. Litterman at ρ = 0.
pub fn fit_fernandez(y_l: &[f64], x: &[f64], cm: &ConversionMatrix, intercept: bool) -> Result<FitResult, ModelError> {
    litterman_as(MethodId::Fernandez, y_l, x, cm, 0.0, intercept)
}

/// Litterman at the fixed ρ = 0.9.
pub fn fit_fast(y_l: &[f64], x: &[f64], cm: &ConversionMatrix, intercept: bool) -> Result<FitResult, ModelError> {
    litterman_as(MethodId::Fast, y_l, x, cm, FAST_RHO, intercept)
}
