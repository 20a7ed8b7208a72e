//! Group-wise removal of negative high-frequency values that keeps each
//! group's aggregation constraint intact where that is possible.

use std::fmt;

use thiserror::Error;

use crate::conversion::{AggregationRule, ConversionMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjustError {
    #[error("target sum {0} is negative")]
    NegativeTarget(f64),
    #[error("length mismatch: {what} has length {found}, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Negatives zeroed, the rest rescaled to keep the constrained total.
    Redistribute,
    QpProjection,
    ZeroFallback,
    FirstReset,
    LastReset,
    EvenSpread,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Redistribute => "redistribute",
            Strategy::QpProjection => "qp-projection",
            Strategy::ZeroFallback => "zero-fallback",
            Strategy::FirstReset => "first-reset",
            Strategy::LastReset => "last-reset",
            Strategy::EvenSpread => "even-spread",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdjustment {
    pub group: usize,
    pub rule: AggregationRule,
    pub strategy: Strategy,
    /// The group's constraint could not be kept while removing negatives.
    pub unresolved: bool,
    /// Low-frequency target supplied for this group.
    pub target: f64,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdjustmentReport {
    pub groups: Vec<GroupAdjustment>,
}

impl AdjustmentReport {
    pub fn touched(&self) -> usize {
        self.groups.len()
    }

    pub fn unresolved(&self) -> usize {
        self.groups.iter().filter(|g| g.unresolved).count()
    }
}

/// Euclidean projection of `v` onto `{y ≥ 0, Σy = target_sum}` by the
/// sort-and-threshold method.
pub fn simplex_project(v: &[f64], target_sum: f64) -> Result<Vec<f64>, AdjustError> {
    if !(target_sum >= 0.0) {
        return Err(AdjustError::NegativeTarget(target_sum));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - target_sum) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    Ok(v.iter().map(|&x| (x - theta).max(0.0)).collect())
}

/// Zeroes negatives among `values` and rescales the positives so the slice
/// sums to `target`. Spreads `target` evenly when no positives remain.
/// Returns `false` (and clamps) when `target < 0`.
fn rebalance(values: &mut [f64], target: f64) -> bool {
    if values.is_empty() {
        return target == 0.0;
    }
    if target < 0.0 {
        for v in values.iter_mut() {
            *v = v.max(0.0);
        }
        return false;
    }
    let positive: f64 = values.iter().filter(|v| **v > 0.0).sum();
    if positive > 0.0 {
        let scale = target / positive;
        for v in values.iter_mut() {
            *v = if *v > 0.0 { (*v * scale).max(0.0) } else { 0.0 };
        }
    } else {
        let even = target / values.len() as f64;
        values.fill(even);
    }
    true
}

fn adjust_sum(v: &[f64]) -> (Vec<f64>, Strategy, bool) {
    let total: f64 = v.iter().sum();
    let positive: f64 = v.iter().filter(|x| **x > 0.0).sum();
    if total >= 0.0 && positive > 0.0 {
        let mut out = v.to_vec();
        rebalance(&mut out, total);
        (out, Strategy::Redistribute, false)
    } else {
        let even = total / v.len() as f64;
        (vec![even; v.len()], Strategy::EvenSpread, total < 0.0)
    }
}

fn adjust_average(v: &[f64]) -> (Vec<f64>, Strategy, bool) {
    let total: f64 = v.iter().sum();
    match simplex_project(v, total) {
        Ok(out) => (out, Strategy::QpProjection, false),
        Err(_) => (v.iter().map(|x| x.max(0.0)).collect(), Strategy::ZeroFallback, true),
    }
}

/// `anchor` is the constrained position (0 for first, m−1 for last).
fn adjust_anchored(v: &[f64], anchor: usize, reset: Strategy) -> (Vec<f64>, Strategy, bool) {
    let total: f64 = v.iter().sum();
    let mut out = v.to_vec();
    let mut strategy = Strategy::Redistribute;
    let mut unresolved = false;
    if out[anchor] < 0.0 {
        out[anchor] = 0.0;
        strategy = reset;
        unresolved = true;
    }
    let rest_target = total - out[anchor];
    let mut rest: Vec<f64> = out.iter().enumerate().filter(|(i, _)| *i != anchor).map(|(_, x)| *x).collect();
    // a negative remainder cannot be kept; the anchor alone is the constraint
    if !rebalance(&mut rest, rest_target) && strategy == Strategy::Redistribute {
        strategy = Strategy::ZeroFallback;
    }
    let mut it = rest.into_iter();
    for (i, slot) in out.iter_mut().enumerate() {
        if i != anchor {
            *slot = it.next().expect("rest has m-1 entries");
        }
    }
    (out, strategy, unresolved)
}

/// Removes negatives group by group under the conversion's rule.
pub fn adjust(y_hat: &[f64], y_l: &[f64], cm: &ConversionMatrix) -> Result<(Vec<f64>, AdjustmentReport), AdjustError> {
    if y_hat.len() != cm.n_high() {
        return Err(AdjustError::LengthMismatch { what: "y_hat", expected: cm.n_high(), found: y_hat.len() });
    }
    if y_l.len() != cm.n_low() {
        return Err(AdjustError::LengthMismatch { what: "y_l", expected: cm.n_low(), found: y_l.len() });
    }
    let rule = cm.rule();
    let mut out = y_hat.to_vec();
    let mut report = AdjustmentReport::default();
    for (g, span) in cm.spans().iter().enumerate() {
        let before = &y_hat[span.range()];
        if !before.iter().any(|v| *v < 0.0) {
            continue;
        }
        let (after, strategy, unresolved) = match rule {
            AggregationRule::Sum => adjust_sum(before),
            AggregationRule::Average => adjust_average(before),
            AggregationRule::First => adjust_anchored(before, 0, Strategy::FirstReset),
            AggregationRule::Last => adjust_anchored(before, before.len() - 1, Strategy::LastReset),
        };
        out[span.range()].copy_from_slice(&after);
        report.groups.push(GroupAdjustment {
            group: g,
            rule,
            strategy,
            unresolved,
            target: y_l[g],
            before: before.to_vec(),
            after,
        });
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Strategy;

    fn cm(rule: AggregationRule, m: usize) -> ConversionMatrix {
        ConversionMatrix::regular(1, m, rule).unwrap()
    }

    fn run(rule: AggregationRule, v: &[f64]) -> (Vec<f64>, AdjustmentReport) {
        let c = cm(rule, v.len());
        let y_l = c.aggregate(v).unwrap();
        adjust(v, &y_l, &c).unwrap()
    }

    #[test]
    fn sum_redistributes_proportionally() {
        let (out, report) = run(AggregationRule::Sum, &[-2.0, 5.0, 5.0]);
        assert_eq!(out, vec![0.0, 4.0, 4.0]);
        assert_eq!(report.groups[0].strategy, Strategy::Redistribute);
        assert!(!report.groups[0].unresolved);
    }

    #[test]
    fn sum_with_negative_total_spreads_evenly_and_flags() {
        let (out, report) = run(AggregationRule::Sum, &[-3.0, -1.0]);
        assert_eq!(out, vec![-2.0, -2.0]);
        assert_eq!(report.groups[0].strategy, Strategy::EvenSpread);
        assert!(report.groups[0].unresolved);
    }

    #[test]
    fn average_projects() {
        let (out, report) = run(AggregationRule::Average, &[-1.0, 3.0]);
        assert_eq!(out, vec![0.0, 2.0]);
        assert_eq!(report.groups[0].strategy, Strategy::QpProjection);
    }

    #[test]
    fn average_negative_mean_falls_back() {
        let (out, report) = run(AggregationRule::Average, &[-3.0, 1.0]);
        assert_eq!(out, vec![0.0, 1.0]);
        assert_eq!(report.groups[0].strategy, Strategy::ZeroFallback);
    }

    #[test]
    fn first_reset_redistributes_discrepancy() {
        let (out, report) = run(AggregationRule::First, &[-2.0, 3.0, 1.0]);
        assert_eq!(out, vec![0.0, 1.5, 0.5]);
        assert_eq!(report.groups[0].strategy, Strategy::FirstReset);
        assert!(report.groups[0].unresolved);
    }

    #[test]
    fn first_kept_when_only_later_values_negative() {
        let (out, report) = run(AggregationRule::First, &[4.0, -1.0, 3.0]);
        assert_eq!(out, vec![4.0, 0.0, 2.0]);
        assert_eq!(report.groups[0].strategy, Strategy::Redistribute);
        assert!(!report.groups[0].unresolved);
    }

    #[test]
    fn anchor_kept_when_remainder_negative() {
        let (out, report) = run(AggregationRule::First, &[3.0, 2.0, -4.0]);
        assert_eq!(out, vec![3.0, 2.0, 0.0]);
        assert_eq!(report.groups[0].strategy, Strategy::ZeroFallback);
        assert!(!report.groups[0].unresolved);
    }

    #[test]
    fn last_mirrors_first() {
        let (out, report) = run(AggregationRule::Last, &[3.0, 1.0, -2.0]);
        assert_eq!(out, vec![1.5, 0.5, 0.0]);
        assert_eq!(report.groups[0].strategy, Strategy::LastReset);
        let (out, _) = run(AggregationRule::Last, &[-1.0, 3.0, 4.0]);
        assert_eq!(out, vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn anchored_spreads_over_zero_rest() {
        let (out, _) = run(AggregationRule::First, &[1.0, -1.0, 4.0, -1.0]);
        // rest must total 2 from positive 4
        assert_eq!(out, vec![1.0, 0.0, 2.0, 0.0]);
        let (out, _) = run(AggregationRule::First, &[1.0, -1.0, 0.0, 3.0]);
        assert_eq!(out, vec![1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn clean_groups_pass_through() {
        let c = ConversionMatrix::regular(2, 2, AggregationRule::Sum).unwrap();
        let v = [1.0, 2.0, -1.0, 3.0];
        let (out, report) = adjust(&v, &[3.0, 2.0], &c).unwrap();
        assert_eq!(&out[..2], &v[..2]);
        assert_eq!(report.touched(), 1);
        assert_eq!(report.groups[0].group, 1);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(simplex_project(&[0.5, 1.5], 2.0).unwrap(), vec![0.5, 1.5]);
        assert_eq!(simplex_project(&[-1.0, 3.0], 2.0).unwrap(), vec![0.0, 2.0]);
        assert_eq!(simplex_project(&[5.0, 5.0], 2.0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(simplex_project(&[1.0, 2.0], -1.0).unwrap_err(), AdjustError::NegativeTarget(-1.0));
        assert_eq!(simplex_project(&[-1.0, -2.0], 0.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn length_mismatch() {
        let c = ConversionMatrix::regular(1, 2, AggregationRule::Sum).unwrap();
        assert!(matches!(adjust(&[1.0], &[1.0], &c), Err(AdjustError::LengthMismatch { what: "y_hat", .. })));
    }

    proptest! {
        #[test]
        fn contracts_hold(
            v in proptest::collection::vec(-10.0f64..10.0, 1..10),
            rule_ix in 0usize..4,
        ) {
            let rule = AggregationRule::ALL[rule_ix];
            let c = cm(rule, v.len());
            let y_l = c.aggregate(&v).unwrap();
            let (out, report) = adjust(&v, &y_l, &c).unwrap();
            let unresolved = report.unresolved() > 0;
            if !(rule == AggregationRule::Sum && unresolved) {
                prop_assert!(out.iter().all(|x| *x >= 0.0));
            }
            if !unresolved {
                let agg = c.aggregate(&out).unwrap();
                prop_assert!((agg[0] - y_l[0]).abs() <= 1e-9);
            }
            let (again, _) = adjust(&out, &y_l, &c).unwrap();
            for (a, b) in again.iter().zip(&out) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
