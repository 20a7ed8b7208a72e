//! Imputation of missing low-frequency targets from the aggregated
//! indicator, ahead of disaggregation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::dvec;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetroError {
    #[error("need at least {needed} observed targets, found {found}")]
    InsufficientObservations { needed: usize, found: usize },
    #[error("indicator has no usable variation: {0}")]
    DegenerateIndicator(String),
    #[error("length mismatch: y_l has {y}, X_l has {x}")]
    LengthMismatch { y: usize, x: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: 8, epochs: 2000, learning_rate: 0.01, seed: DEFAULT_SEED }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RetroMethod {
    Proportion,
    Linear,
    Polynomial { degree: usize },
    ExpSmoothing { alpha: f64 },
    Mlp(MlpConfig),
    Auto,
}

impl fmt::Display for RetroMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetroMethod::Proportion => f.write_str("proportion"),
            RetroMethod::Linear => f.write_str("linear"),
            RetroMethod::Polynomial { degree } => write!(f, "poly{degree}"),
            RetroMethod::ExpSmoothing { alpha } => write!(f, "expsmooth(alpha={alpha})"),
            RetroMethod::Mlp(_) => f.write_str("mlp"),
            RetroMethod::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for RetroMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "proportion" => Ok(RetroMethod::Proportion),
            "linear" => Ok(RetroMethod::Linear),
            "poly2" => Ok(RetroMethod::Polynomial { degree: 2 }),
            "poly3" => Ok(RetroMethod::Polynomial { degree: 3 }),
            "expsmooth" => Ok(RetroMethod::ExpSmoothing { alpha: 0.5 }),
            "mlp" => Ok(RetroMethod::Mlp(MlpConfig::default())),
            "auto" => Ok(RetroMethod::Auto),
            other => Err(format!(
                "unknown retropolation method `{other}` (proportion|linear|poly2|poly3|expsmooth|mlp|auto)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetroResult {
    pub y_l_filled: Vec<f64>,
    /// Positions of the groups that were imputed.
    pub imputed_groups: Vec<usize>,
    pub method_used: RetroMethod,
    /// In-sample RMSE over the observed groups.
    pub rmse: f64,
}

fn observed_pairs(y_l: &[Option<f64>], x_l: &[f64]) -> (Vec<f64>, Vec<f64>) {
    y_l.iter().zip(x_l).filter_map(|(y, x)| y.map(|y| (x, y))).unzip()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Picks a method from the amount and shape of the observed data.
pub fn auto_select(y_l: &[Option<f64>], x_l: &[f64]) -> Result<RetroMethod, RetroError> {
    let (xs, ys) = observed_pairs(y_l, x_l);
    if xs.len() < 2 {
        return Err(RetroError::InsufficientObservations { needed: 2, found: xs.len() });
    }
    Ok(if xs.len() < 6 {
        RetroMethod::Proportion
    } else if pearson(&xs, &ys).abs() >= 0.8 {
        RetroMethod::Linear
    } else if xs.len() >= 12 {
        RetroMethod::Polynomial { degree: 2 }
    } else {
        RetroMethod::ExpSmoothing { alpha: 0.5 }
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Least-squares polynomial in the standardized indicator.
struct PolyFit {
    coef: DVector<f64>,
    center: f64,
    scale: f64,
}

impl PolyFit {
    fn fit(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit, RetroError> {
        let (center, scale) = mean_sd(xs);
        if !(scale > 0.0) {
            return Err(RetroError::DegenerateIndicator("X_l is constant over observed groups".into()));
        }
        let vander = DMatrix::from_fn(xs.len(), degree + 1, |i, k| ((xs[i] - center) / scale).powi(k as i32));
        let svd = vander.svd(true, true);
        let sv = &svd.singular_values;
        if sv.min() <= 1e-12 * sv.max() {
            return Err(RetroError::DegenerateIndicator("too few distinct X_l values".into()));
        }
        let coef = svd
            .solve(&dvec(ys), 0.0)
            .map_err(|e| RetroError::DegenerateIndicator(e.to_string()))?;
        Ok(PolyFit { coef, center, scale })
    }

    fn predict(&self, x: f64) -> f64 {
        let t = (x - self.center) / self.scale;
        self.coef.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }
}

/// Single hidden layer of tanh units with a linear output, trained by
/// full-batch gradient descent on standardized data.
struct Mlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl Mlp {
    fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Mlp {
        let limit1 = (6.0 / (1 + hidden) as f64).sqrt();
        let w1 = (0..hidden).map(|_| rng.random_range(-limit1..limit1)).collect();
        let w2 = (0..hidden).map(|_| rng.random_range(-limit1..limit1)).collect();
        Mlp { w1, b1: vec![0.0; hidden], w2, b2: 0.0 }
    }

    fn forward(&self, x: f64) -> f64 {
        self.w1
            .iter()
            .zip(&self.b1)
            .zip(&self.w2)
            .map(|((w, b), v)| v * (w * x + b).tanh())
            .sum::<f64>()
            + self.b2
    }

    fn train(&mut self, xs: &[f64], ys: &[f64], epochs: usize, lr: f64) {
        let h = self.w1.len();
        let n = xs.len() as f64;
        let mut g_w1 = vec![0.0; h];
        let mut g_b1 = vec![0.0; h];
        let mut g_w2 = vec![0.0; h];
        for _ in 0..epochs {
            g_w1.fill(0.0);
            g_b1.fill(0.0);
            g_w2.fill(0.0);
            let mut g_b2 = 0.0;
            for (&x, &y) in xs.iter().zip(ys) {
                let act: Vec<f64> = (0..h).map(|k| (self.w1[k] * x + self.b1[k]).tanh()).collect();
                let pred: f64 = act.iter().zip(&self.w2).map(|(a, v)| a * v).sum::<f64>() + self.b2;
                // d/dpred of mean squared error
                let err = 2.0 * (pred - y) / n;
                g_b2 += err;
                for k in 0..h {
                    g_w2[k] += err * act[k];
                    let back = err * self.w2[k] * (1.0 - act[k] * act[k]);
                    g_w1[k] += back * x;
                    g_b1[k] += back;
                }
            }
            for k in 0..h {
                self.w1[k] -= lr * g_w1[k];
                self.b1[k] -= lr * g_b1[k];
                self.w2[k] -= lr * g_w2[k];
            }
            self.b2 -= lr * g_b2;
        }
    }
}

fn rmse(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (sum, count) = pairs.fold((0.0, 0usize), |(s, c), (p, t)| (s + (p - t).powi(2), c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Fills the `None` entries of `y_l`; observed entries pass through.
pub fn retropolate(y_l: &[Option<f64>], x_l: &[f64], method: RetroMethod) -> Result<RetroResult, RetroError> {
    if y_l.len() != x_l.len() {
        return Err(RetroError::LengthMismatch { y: y_l.len(), x: x_l.len() });
    }
    let method = match method {
        RetroMethod::Auto => auto_select(y_l, x_l)?,
        other => other,
    };
    let (xs, ys) = observed_pairs(y_l, x_l);
    let needed = match method {
        RetroMethod::Polynomial { degree } => degree + 1,
        RetroMethod::Mlp(_) => 8,
        _ => 2,
    };
    if xs.len() < needed {
        return Err(RetroError::InsufficientObservations { needed, found: xs.len() });
    }

    let predictor: Box<dyn Fn(usize) -> f64> = match method {
        RetroMethod::Proportion => {
            let denom: f64 = xs.iter().sum();
            if denom == 0.0 {
                return Err(RetroError::DegenerateIndicator("observed X_l sums to zero".into()));
            }
            let ratio = ys.iter().sum::<f64>() / denom;
            Box::new(move |i| ratio * x_l[i])
        }
        RetroMethod::Linear => {
            let fit = PolyFit::fit(&xs, &ys, 1)?;
            Box::new(move |i| fit.predict(x_l[i]))
        }
        RetroMethod::Polynomial { degree } => {
            if !(1..=3).contains(&degree) {
                return Err(RetroError::InvalidParameter(format!("polynomial degree {degree}")));
            }
            let fit = PolyFit::fit(&xs, &ys, degree)?;
            Box::new(move |i| fit.predict(x_l[i]))
        }
        RetroMethod::ExpSmoothing { alpha } => {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(RetroError::InvalidParameter(format!("alpha {alpha} outside (0, 1]")));
            }
            let states = smoothed_states(y_l, alpha);
            let filled: Vec<f64> = states.iter().map(|s| s.0).collect();
            let in_sample = rmse(states.iter().zip(y_l).filter_map(|(s, y)| Some((s.1?, (*y)?))));
            return Ok(finish(y_l, |i| filled[i], method, in_sample));
        }
        RetroMethod::Mlp(cfg) => {
            if cfg.hidden == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
                return Err(RetroError::InvalidParameter("mlp config".into()));
            }
            let (mx, sx) = mean_sd(&xs);
            let (my, sy) = mean_sd(&ys);
            if !(sx > 0.0) {
                return Err(RetroError::DegenerateIndicator("X_l is constant over observed groups".into()));
            }
            let sy = if sy > 0.0 { sy } else { 1.0 };
            let zx: Vec<f64> = xs.iter().map(|x| (x - mx) / sx).collect();
            let zy: Vec<f64> = ys.iter().map(|y| (y - my) / sy).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut net = Mlp::new(cfg.hidden, &mut rng);
            net.train(&zx, &zy, cfg.epochs, cfg.learning_rate);
            Box::new(move |i| my + sy * net.forward((x_l[i] - mx) / sx))
        }
        RetroMethod::Auto => unreachable!("resolved above"),
    };
    let in_sample = rmse(y_l.iter().enumerate().filter_map(|(i, y)| y.map(|y| (predictor(i), y))));
    Ok(finish(y_l, predictor, method, in_sample))
}

/// Forward exponential smoothing over observed entries. For each position
/// returns the state used to fill it and, for observed positions after the
/// first, the one-step-ahead prediction. Leading gaps take the first
/// observation.
fn smoothed_states(y_l: &[Option<f64>], alpha: f64) -> Vec<(f64, Option<f64>)> {
    let first = y_l.iter().find_map(|y| *y).expect("at least two observations");
    let mut state = first;
    let mut seen = false;
    y_l.iter()
        .map(|y| match y {
            Some(v) => {
                let prediction = seen.then_some(state);
                state = if seen { alpha * v + (1.0 - alpha) * state } else { *v };
                seen = true;
                (state, prediction)
            }
            None => (state, None),
        })
        .collect()
}

fn finish(y_l: &[Option<f64>], predict: impl Fn(usize) -> f64, method: RetroMethod, rmse: f64) -> RetroResult {
    let mut imputed_groups = Vec::new();
    let y_l_filled = y_l
        .iter()
        .enumerate()
        .map(|(i, y)| match y {
            Some(v) => *v,
            None => {
                imputed_groups.push(i);
                predict(i)
            }
        })
        .collect();
    RetroResult { y_l_filled, imputed_groups, method_used: method, rmse }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_gap(values: &[f64], gaps: &[usize]) -> Vec<Option<f64>> {
        values.iter().enumerate().map(|(i, v)| (!gaps.contains(&i)).then_some(*v)).collect()
    }

    #[test]
    fn proportion_recovers_ratio() {
        let x = [1.0, 2.0, 3.0, 7.0];
        let y = with_gap(&[2.0, 4.0, 6.0, 0.0], &[3]);
        let r = retropolate(&y, &x, RetroMethod::Proportion).unwrap();
        assert_eq!(r.y_l_filled[3], 14.0);
        assert_eq!(r.imputed_groups, vec![3]);
        assert_eq!(&r.y_l_filled[..3], &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_recovers_affine() {
        let x: Vec<f64> = (0..10).map(|i| 1.5 * i as f64 + 0.3).collect();
        let truth: Vec<f64> = x.iter().map(|v| 3.0 + 2.0 * v).collect();
        let y = with_gap(&truth, &[0, 9]);
        let r = retropolate(&y, &x, RetroMethod::Linear).unwrap();
        for (a, b) in r.y_l_filled.iter().zip(&truth) {
            assert!((a - b).abs() <= 1e-8);
        }
        assert!(r.rmse < 1e-10);
    }

    #[test]
    fn quadratic_recovered() {
        let x: Vec<f64> = (1..=7).map(|i| i as f64).collect();
        let truth: Vec<f64> = x.iter().map(|v| v * v).collect();
        let y = with_gap(&truth, &[6]);
        let r = retropolate(&y, &x, RetroMethod::Polynomial { degree: 2 }).unwrap();
        assert!((r.y_l_filled[6] - 49.0).abs() <= 1e-6);
    }

    #[test]
    fn exp_smoothing_fills_forward() {
        let y = vec![Some(10.0), Some(20.0), None, Some(30.0), None];
        let r = retropolate(&y, &[1.0; 5], RetroMethod::ExpSmoothing { alpha: 0.5 }).unwrap();
        // states: 10, 15, (15), 22.5, (22.5)
        assert_eq!(r.y_l_filled, vec![10.0, 20.0, 15.0, 30.0, 22.5]);
        let y = vec![None, Some(4.0), Some(6.0)];
        let r = retropolate(&y, &[1.0; 3], RetroMethod::ExpSmoothing { alpha: 0.5 }).unwrap();
        assert_eq!(r.y_l_filled[0], 4.0);
    }

    #[test]
    fn mlp_fits_linear_relation() {
        let x: Vec<f64> = (0..22).map(|i| 10.0 + 2.0 * i as f64).collect();
        let truth: Vec<f64> = x.iter().map(|v| 5.0 + 3.0 * v).collect();
        let y = with_gap(&truth, &[20, 21]);
        let r = retropolate(&y, &x, RetroMethod::Mlp(MlpConfig::default())).unwrap();
        let (_, sd) = mean_sd(&truth[..20]);
        assert!(r.rmse <= 0.1 * sd, "rmse {} vs sd {}", r.rmse, sd);
        let again = retropolate(&y, &x, RetroMethod::Mlp(MlpConfig::default())).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn auto_rule() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y4 = with_gap(&x[..5], &[4]);
        assert_eq!(auto_select(&y4, &x[..5]).unwrap(), RetroMethod::Proportion);
        let lin: Vec<Option<f64>> = x.iter().map(|v| Some(2.0 * v + 1.0)).collect();
        assert_eq!(auto_select(&lin, &x).unwrap(), RetroMethod::Linear);
        // 8 observations, weak correlation
        let noisy = [5.0, 1.0, 4.0, 2.0, 5.0, 1.0, 3.0, 3.0];
        let corr = pearson(&x[..8], &noisy);
        assert!(corr.abs() < 0.8);
        let y: Vec<Option<f64>> = noisy.iter().map(|v| Some(*v)).collect();
        assert_eq!(auto_select(&y, &x[..8]).unwrap(), RetroMethod::ExpSmoothing { alpha: 0.5 });
        assert!(matches!(
            auto_select(&[Some(1.0), None], &[1.0, 2.0]),
            Err(RetroError::InsufficientObservations { .. })
        ));
    }

    #[test]
    fn error_paths() {
        let y = vec![Some(1.0), Some(2.0), None];
        assert!(matches!(
            retropolate(&y, &[3.0, 3.0, 4.0], RetroMethod::Linear),
            Err(RetroError::DegenerateIndicator(_))
        ));
        assert!(matches!(
            retropolate(&y, &[1.0, 2.0, 3.0], RetroMethod::Polynomial { degree: 2 }),
            Err(RetroError::InsufficientObservations { needed: 3, found: 2 })
        ));
        assert!(matches!(
            retropolate(&y, &[1.0, 2.0, 3.0], RetroMethod::Mlp(MlpConfig::default())),
            Err(RetroError::InsufficientObservations { needed: 8, .. })
        ));
        assert!(matches!(retropolate(&y, &[1.0], RetroMethod::Linear), Err(RetroError::LengthMismatch { .. })));
    }
}
