//! Aggregation operator mapping high-frequency vectors to group aggregates.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::frame::Frame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConversionError {
    #[error("frame is incomplete: group {index} does not hold grains 1..={len}")]
    IncompleteFrame { index: String, len: usize },
    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("empty group span")]
    EmptySpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationRule {
    Sum,
    Average,
    First,
    Last,
}

impl AggregationRule {
    pub const ALL: [AggregationRule; 4] =
        [AggregationRule::Sum, AggregationRule::Average, AggregationRule::First, AggregationRule::Last];

    /// Weights of one group of length `len`.
    pub fn weights(self, len: usize) -> Vec<f64> {
        let mut w = vec![0.0; len];
        match self {
            AggregationRule::Sum => w.fill(1.0),
            AggregationRule::Average => w.fill(1.0 / len as f64),
            AggregationRule::First => w[0] = 1.0,
            AggregationRule::Last => w[len - 1] = 1.0,
        }
        w
    }
}

impl FromStr for AggregationRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(AggregationRule::Sum),
            "average" | "mean" => Ok(AggregationRule::Average),
            "first" => Ok(AggregationRule::First),
            "last" => Ok(AggregationRule::Last),
            other => Err(format!("unknown conversion `{other}` (sum|average|first|last)")),
        }
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationRule::Sum => "sum",
            AggregationRule::Average => "average",
            AggregationRule::First => "first",
            AggregationRule::Last => "last",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Dense `n_l x n` aggregation matrix together with the group spans that
/// generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionMatrix {
    c: DMatrix<f64>,
    rule: AggregationRule,
    spans: Vec<Span>,
}

impl ConversionMatrix {
    /// Builds C from consecutive group lengths; groups may be ragged.
    pub fn from_lengths(lengths: &[usize], rule: AggregationRule) -> Result<Self, ConversionError> {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            if len == 0 {
                return Err(ConversionError::EmptySpan);
            }
            spans.push(Span { start, len });
            start += len;
        }
        let mut c = DMatrix::zeros(spans.len(), start);
        for (r, span) in spans.iter().enumerate() {
            for (k, w) in rule.weights(span.len).into_iter().enumerate() {
                c[(r, span.start + k)] = w;
            }
        }
        Ok(ConversionMatrix { c, rule, spans })
    }

    /// `n_l` groups of `m` sub-periods each.
    pub fn regular(n_l: usize, m: usize, rule: AggregationRule) -> Result<Self, ConversionError> {
        Self::from_lengths(&vec![m; n_l], rule)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn rule(&self) -> AggregationRule {
        self.rule
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn n_low(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_high(&self) -> usize {
        self.c.ncols()
    }

    pub fn aggregate(&self, y: &[f64]) -> Result<Vec<f64>, ConversionError> {
        if y.len() != self.n_high() {
            return Err(ConversionError::LengthMismatch { expected: self.n_high(), found: y.len() });
        }
        let v = &self.c * DVector::from_column_slice(y);
        Ok(v.as_slice().to_vec())
    }

    /// `C A` for an `n x k` matrix, exploiting the group structure.
    pub fn aggregate_columns(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_low(), a.ncols());
        for (r, span) in self.spans.iter().enumerate() {
            for i in span.range() {
                let w = self.c[(r, i)];
                if w != 0.0 {
                    for j in 0..a.ncols() {
                        out[(r, j)] += w * a[(i, j)];
                    }
                }
            }
        }
        out
    }

    /// `Q Cᵀ` for an `n x n` matrix `Q`.
    pub fn right_transpose_product(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n_high();
        let mut out = DMatrix::zeros(n, self.n_low());
        for (r, span) in self.spans.iter().enumerate() {
            for j in span.range() {
                let w = self.c[(r, j)];
                if w != 0.0 {
                    let col = q.column(j);
                    let mut dst = out.column_mut(r);
                    dst.axpy(w, &col, 1.0);
                }
            }
        }
        out
    }

    /// Returns `(Q Cᵀ, C Q Cᵀ)`.
    pub fn project_covariance(&self, q: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let qct = self.right_transpose_product(q);
        let mut v = self.aggregate_columns(&qct);
        // symmetrize away rounding asymmetry
        let vt = v.transpose();
        v = (v + vt) * 0.5;
        (qct, v)
    }
}

/// Builds C for a complete frame: each group must hold grains `1..=len`.
pub fn build_c(frame: &Frame, rule: AggregationRule) -> Result<ConversionMatrix, ConversionError> {
    let mut lengths = Vec::with_capacity(frame.n_groups());
    for g in frame.groups() {
        let rows = &frame.rows()[g.range()];
        let contiguous = rows.iter().enumerate().all(|(k, r)| r.grain as usize == k + 1);
        if !contiguous {
            return Err(ConversionError::IncompleteFrame { index: g.index.to_string(), len: g.len });
        }
        lengths.push(g.len);
    }
    ConversionMatrix::from_lengths(&lengths, rule)
}
