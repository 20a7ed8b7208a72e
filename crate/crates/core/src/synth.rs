//! Seeded synthetic fixtures: an AR(1) indicator and a target built as
//! `a + b·X + u` with AR(1) noise `u`, then aggregated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::conversion::{AggregationRule, ConversionMatrix};
use crate::frame::{Frame, Row};

pub const X_LEVEL: f64 = 100.0;
pub const X_PERSISTENCE: f64 = 0.8;
pub const X_SHOCK_SD: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("n_l and m must be positive")]
    EmptyShape,
    #[error("rho must satisfy |rho| < 1, got {0}")]
    RhoOutOfRange(f64),
    #[error("noise sd must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_l: usize,
    pub m: usize,
    pub rho: f64,
    pub intercept: f64,
    pub beta: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub rule: AggregationRule,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_l: 20,
            m: 4,
            rho: 0.5,
            intercept: 0.0,
            beta: 2.0,
            noise_sd: 1.0,
            seed: 42,
            rule: AggregationRule::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub x: Vec<f64>,
    pub y_true: Vec<f64>,
    pub y_l: Vec<f64>,
    pub cm: ConversionMatrix,
}

impl SynthData {
    /// One row per sub-period; `y` carries the group target and `y_true`
    /// is added as an extra column.
    pub fn to_frame(&self) -> Frame {
        let m = self.cm.spans()[0].len;
        let rows = self
            .x
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let mut row = Row::new((i / m + 1) as i64, (i % m + 1) as u32, Some(self.y_l[i / m]), Some(x));
                row.extra = vec![Some(self.y_true[i])];
                row
            })
            .collect();
        Frame::new(rows, vec!["y_true".into()]).expect("generated keys are unique")
    }
}

/// Stationary AR(1) path with the given shock sd, started from its
/// stationary distribution.
fn ar1(rng: &mut ChaCha8Rng, n: usize, rho: f64, shock_sd: f64) -> Vec<f64> {
    if shock_sd == 0.0 {
        return vec![0.0; n];
    }
    let shock = Normal::new(0.0, shock_sd).expect("finite sd");
    let mut out = Vec::with_capacity(n);
    let mut state = shock.sample(rng) / (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        out.push(state);
        state = rho * state + shock.sample(rng);
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData, SynthError> {
    if cfg.n_l == 0 || cfg.m == 0 {
        return Err(SynthError::EmptyShape);
    }
    if !(cfg.rho.abs() < 1.0) {
        return Err(SynthError::RhoOutOfRange(cfg.rho));
    }
    if !(cfg.noise_sd.is_finite() && cfg.noise_sd >= 0.0) {
        return Err(SynthError::InvalidNoise(cfg.noise_sd));
    }
    let n = cfg.n_l * cfg.m;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x: Vec<f64> = ar1(&mut rng, n, X_PERSISTENCE, X_SHOCK_SD).into_iter().map(|v| X_LEVEL + v).collect();
    let u = ar1(&mut rng, n, cfg.rho, cfg.noise_sd);
    let y_true: Vec<f64> = x.iter().zip(&u).map(|(x, u)| cfg.intercept + cfg.beta * x + u).collect();
    let cm = ConversionMatrix::regular(cfg.n_l, cfg.m, cfg.rule).expect("positive shape");
    let y_l = cm.aggregate(&y_true).expect("length matches");
    Ok(SynthData { x, y_true, y_l, cm })
}
