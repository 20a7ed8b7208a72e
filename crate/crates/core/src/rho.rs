//! Autocorrelation parameter search and coefficient inference.
//!
//! Candidates are scored by the profile log-likelihood of the low-frequency
//! GLS system (`maxlog`) or by the generalized residual sum of squares
//! (`minrss`). A 381-point grid pre-scan picks the bracket, then a
//! golden-section search refines it.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::conversion::ConversionMatrix;
use crate::gls::{design, gls, GlsError};
use crate::linalg::dvec;

pub const DEFAULT_BOUNDS: (f64, f64) = (-0.9, 0.99);
pub const GRID_POINTS: usize = 381;
pub const TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RhoError {
    #[error("rho = {0} is outside (-1, 1)")]
    RhoOutOfRange(f64),
    #[error("invalid bounds ({0}, {1}); need -1 < lo < hi < 1")]
    InvalidBounds(f64, f64),
    #[error("V is singular at rho = {0}")]
    SingularV(f64),
    #[error("no candidate rho produced a finite objective")]
    NoFiniteCandidate,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("non-positive variance for coefficient {0}")]
    NonPositiveVariance(usize),
    #[error("degrees of freedom must be >= 1")]
    InvalidDof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoObjective {
    MaxLog,
    MinRss,
}

impl FromStr for RhoObjective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "maxlog" => Ok(RhoObjective::MaxLog),
            "minrss" => Ok(RhoObjective::MinRss),
            other => Err(format!("unknown rho objective `{other}` (maxlog|minrss)")),
        }
    }
}

impl fmt::Display for RhoObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RhoObjective::MaxLog => "maxlog",
            RhoObjective::MinRss => "minrss",
        })
    }
}

/// Which residual covariance family `Q_ρ` belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QBuilder {
    /// Stationary AR(1): `ρ^|i−j| / (1 − ρ²)`.
    ChowLin,
    /// `(Dᵀ H_ρᵀ H_ρ D)⁻¹` with `H_ρ = I − ρL`.
    Litterman,
}

/// Absolute time distances `|i − j|` between high-frequency periods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PowerMatrix {
    n: usize,
    lags: Vec<u32>,
}

impl PowerMatrix {
    pub fn new(n: usize) -> Self {
        let mut lags = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                lags.push(i.abs_diff(j) as u32);
            }
        }
        PowerMatrix { n, lags }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.lags[i * self.n + j]
    }
}

/// Residual covariance `Q_ρ` for the given family.
pub fn build_q(rho: f64, power: &PowerMatrix, builder: QBuilder) -> Result<DMatrix<f64>, RhoError> {
    if !(rho.abs() < 1.0) {
        return Err(RhoError::RhoOutOfRange(rho));
    }
    let n = power.n();
    match builder {
        QBuilder::ChowLin => {
            let scale = 1.0 / (1.0 - rho * rho);
            let powers: Vec<f64> = (0..n.max(1)).map(|k| rho.powi(k as i32) * scale).collect();
            Ok(DMatrix::from_fn(n, n, |i, j| powers[power.get(i, j) as usize]))
        }
        QBuilder::Litterman => Ok(litterman_q(rho, n)),
    }
}

/// `(H_ρ D)⁻¹` is lower-triangular Toeplitz with entries `a_d = Σ_{t≤d} ρ^t`,
/// so `Q[i][j] = Q[i−1][j−1] + a_i a_j`.
fn litterman_q(rho: f64, n: usize) -> DMatrix<f64> {
    let mut a = Vec::with_capacity(n);
    let mut acc = 0.0;
    for _ in 0..n {
        acc = 1.0 + rho * acc;
        a.push(acc);
    }
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let prev = if i > 0 { q[(i - 1, j - 1)] } else { 0.0 };
            let v = prev + a[i] * a[j];
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }
    q
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub se: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub stars: Vec<String>,
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Standard errors, t-statistics and two-sided p-values under the normal
/// approximation.
pub fn inference(beta: &[f64], vcov: &DMatrix<f64>, dof: usize) -> Result<Inference, RhoError> {
    if dof < 1 {
        return Err(RhoError::InvalidDof);
    }
    let mut out = Inference { se: vec![], t_stats: vec![], p_values: vec![], stars: vec![] };
    for (k, b) in beta.iter().enumerate() {
        let var = vcov[(k, k)];
        if !(var > 0.0) || !var.is_finite() {
            return Err(RhoError::NonPositiveVariance(k));
        }
        let se = var.sqrt();
        let t = b / se;
        let p = libm::erfc(t.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
        out.se.push(se);
        out.t_stats.push(t);
        out.p_values.push(p);
        out.stars.push(significance_stars(p).to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RhoResult {
    pub rho_hat: f64,
    pub objective: RhoObjective,
    /// Objective at `rho_hat` in its natural sign (log-likelihood or RSS).
    pub objective_value: f64,
    pub beta_hat: Vec<f64>,
    pub residuals_low: Vec<f64>,
    pub q: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub vcov: Option<DMatrix<f64>>,
    pub inference: Option<Inference>,
    /// Every evaluated `(ρ, objective)` pair in evaluation order.
    pub objective_trace: Vec<(f64, f64)>,
}

/// Evaluates candidate values of ρ for one data set.
pub struct RhoProblem<'a> {
    y_l: &'a [f64],
    x: &'a [f64],
    builder: QBuilder,
    intercept: bool,
    power: PowerMatrix,
    x_l: DMatrix<f64>,
    /// Nonzero aggregation weights `(row, weight)` of each group.
    taps: Vec<Vec<(usize, f64)>>,
}

impl<'a> RhoProblem<'a> {
    pub fn new(
        y_l: &'a [f64],
        x: &'a [f64],
        cm: &'a ConversionMatrix,
        builder: QBuilder,
        intercept: bool,
    ) -> Self {
        let x_l = cm.aggregate_columns(&design(x, intercept));
        let taps = cm
            .spans()
            .iter()
            .map(|s| {
                let w = cm.rule().weights(s.len);
                s.range().zip(w).filter(|(_, w)| *w != 0.0).collect()
            })
            .collect();
        RhoProblem { y_l, x, builder, intercept, power: PowerMatrix::new(x.len()), x_l, taps }
    }

    /// `V = C Q_ρ Cᵀ` assembled without forming `Q_ρ Cᵀ`.
    fn low_covariance(&self, rho: f64) -> Option<DMatrix<f64>> {
        if !(rho.abs() < 1.0) {
            return None;
        }
        let n_l = self.taps.len();
        let mut v = DMatrix::zeros(n_l, n_l);
        let mut fill = |entry: &dyn Fn(usize, usize) -> f64| {
            for a in 0..n_l {
                for b in a..n_l {
                    let mut acc = 0.0;
                    for &(i, wi) in &self.taps[a] {
                        for &(j, wj) in &self.taps[b] {
                            acc += wi * wj * entry(i, j);
                        }
                    }
                    v[(a, b)] = acc;
                    v[(b, a)] = acc;
                }
            }
        };
        match self.builder {
            QBuilder::ChowLin => {
                let scale = 1.0 / (1.0 - rho * rho);
                let mut powers = Vec::with_capacity(self.x.len().max(1));
                let mut p = scale;
                for _ in 0..self.x.len().max(1) {
                    powers.push(p);
                    p *= rho;
                }
                fill(&|i, j| powers[i.abs_diff(j)]);
            }
            QBuilder::Litterman => {
                let q = litterman_q(rho, self.x.len());
                fill(&|i, j| q[(i, j)]);
            }
        }
        Some(v)
    }

    /// Objective in its natural sign; `None` when V is singular or the
    /// design degenerates at this ρ.
    pub fn objective(&self, rho: f64, kind: RhoObjective) -> Option<f64> {
        let v = self.low_covariance(rho)?;
        let fit = gls(&dvec(self.y_l), &self.x_l, &v).ok()?;
        let value = match kind {
            RhoObjective::MaxLog => fit.log_likelihood(),
            RhoObjective::MinRss => fit.rss,
        };
        value.is_finite().then_some(value)
    }

    /// Objective mapped to a quantity to minimize; failures map to +∞.
    pub fn loss(&self, rho: f64, kind: RhoObjective) -> f64 {
        match (self.objective(rho, kind), kind) {
            (Some(v), RhoObjective::MaxLog) => -v,
            (Some(v), RhoObjective::MinRss) => v,
            (None, _) => f64::INFINITY,
        }
    }

    pub fn x(&self) -> &[f64] {
        self.x
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }
}

/// Evenly spaced candidates spanning `[lo, hi]` inclusive.
pub fn grid(bounds: (f64, f64), points: usize) -> Vec<f64> {
    let (lo, hi) = bounds;
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|k| if k + 1 == points { hi } else { lo + step * k as f64 }).collect()
}

fn check_bounds(bounds: (f64, f64)) -> Result<(), RhoError> {
    let (lo, hi) = bounds;
    if lo > -1.0 && hi < 1.0 && lo < hi {
        Ok(())
    } else {
        Err(RhoError::InvalidBounds(lo, hi))
    }
}

/// Finds ρ̂ within `bounds` and returns the GLS fit and inference at it.
pub fn optimize(
    y_l: &[f64],
    x: &[f64],
    cm: &ConversionMatrix,
    objective: RhoObjective,
    builder: QBuilder,
    bounds: (f64, f64),
    intercept: bool,
) -> Result<RhoResult, RhoError> {
    check_bounds(bounds)?;
    let problem = RhoProblem::new(y_l, x, cm, builder, intercept);
    let natural = |loss: f64| match objective {
        RhoObjective::MaxLog => -loss,
        RhoObjective::MinRss => loss,
    };

    let candidates = grid(bounds, GRID_POINTS);
    let losses: Vec<f64> = candidates.par_iter().map(|&r| problem.loss(r, objective)).collect();
    let mut trace: Vec<(f64, f64)> =
        candidates.iter().zip(&losses).map(|(&r, &l)| (r, natural(l))).collect();

    let (best_k, best_loss) = losses
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, l)| if l < acc.1 { (k, l) } else { acc });
    if !best_loss.is_finite() {
        return Err(RhoError::NoFiniteCandidate);
    }

    let lo = candidates[best_k.saturating_sub(1)];
    let hi = candidates[(best_k + 1).min(candidates.len() - 1)];
    let (golden_rho, golden_loss) = golden_section(lo, hi, |r| {
        let l = problem.loss(r, objective);
        trace.push((r, natural(l)));
        l
    });
    let rho_hat = if golden_loss < best_loss { golden_rho } else { candidates[best_k] };

    let q = build_q(rho_hat, &problem.power, builder)?;
    let (_, v) = cm.project_covariance(&q);
    let fit = gls(&dvec(y_l), &problem.x_l, &v).map_err(|e| match e {
        GlsError::SingularV => RhoError::SingularV(rho_hat),
        GlsError::RankDeficient => RhoError::RankDeficient,
    })?;
    let objective_value = match objective {
        RhoObjective::MaxLog => fit.log_likelihood(),
        RhoObjective::MinRss => fit.rss,
    };
    let vcov = fit.vcov();
    let beta_hat = fit.beta.as_slice().to_vec();
    let inference = vcov.as_ref().and_then(|vc| inference(&beta_hat, vc, fit.dof()).ok());
    Ok(RhoResult {
        rho_hat,
        objective,
        objective_value,
        beta_hat,
        residuals_low: fit.residuals.as_slice().to_vec(),
        q,
        v,
        vcov,
        inference,
        objective_trace: trace,
    })
}

/// Golden-section minimization on `[a, b]`; returns the best point seen.
pub fn golden_section(mut a: f64, mut b: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    let mut iterations = 0;
    while (b - a).abs() > TOLERANCE && iterations < MAX_ITERATIONS {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
        iterations += 1;
    }
    best
}
