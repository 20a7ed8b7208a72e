//! Sub-period completion: fill every (index, grain) combination and
//! interpolate the indicator over the inserted rows.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::frame::{Frame, IndexKey, Row};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompletionError {
    #[error("indicator X is missing on every row; interpolation impossible")]
    AllXMissing,
    #[error(transparent)]
    Frame(#[from] crate::frame::FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterpMethod {
    #[default]
    Linear,
    Nearest,
}

impl FromStr for InterpMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(InterpMethod::Linear),
            "nearest" => Ok(InterpMethod::Nearest),
            other => Err(format!("unknown interpolation method `{other}` (linear|nearest)")),
        }
    }
}

impl fmt::Display for InterpMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterpMethod::Linear => "linear",
            InterpMethod::Nearest => "nearest",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionConfig {
    pub x_method: InterpMethod,
    /// Pad partial first/last groups. When off, partial boundary groups are
    /// trimmed instead.
    pub pad_boundaries: bool,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig { x_method: InterpMethod::Linear, pad_boundaries: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompletionLog {
    pub inserted: Vec<(IndexKey, u32)>,
    pub imputed_x: Vec<(IndexKey, u32, f64, InterpMethod)>,
    pub padded_groups: Vec<IndexKey>,
    pub trimmed_groups: Vec<IndexKey>,
}

/// Completes the (index, grain) lattice to grains `1..=m` for every group,
/// where `m` is the largest grain in the frame, then fills missing `X`.
pub fn complete(frame: &Frame, config: CompletionConfig) -> Result<(Frame, CompletionLog), CompletionError> {
    let mut log = CompletionLog::default();
    if frame.is_empty() {
        return Ok((frame.clone(), log));
    }
    if frame.rows().iter().all(|r| r.x.is_none()) {
        return Err(CompletionError::AllXMissing);
    }
    let m = frame.max_grain();

    let boundary = boundary_partial_groups(frame, m);
    let source = if config.pad_boundaries || boundary.is_empty() {
        frame.clone()
    } else {
        log.trimmed_groups = boundary.clone();
        frame.without_groups(&boundary)
    };

    let n_extra = source.extra_names().len();
    let targets = source.group_targets();
    let mut rows: Vec<Row> = Vec::with_capacity(source.n_groups() * m as usize);
    for (g, target) in source.groups().iter().zip(&targets) {
        let existing = &source.rows()[g.range()];
        let present: HashSet<u32> = existing.iter().map(|r| r.grain).collect();
        let mut inserted_any = false;
        for grain in 1..=m {
            if !present.contains(&grain) {
                rows.push(Row {
                    index: g.index.clone(),
                    grain,
                    y: *target,
                    x: None,
                    extra: vec![None; n_extra],
                });
                log.inserted.push((g.index.clone(), grain));
                inserted_any = true;
            }
        }
        rows.extend(existing.iter().cloned());
        if inserted_any && config.pad_boundaries && boundary.contains(&g.index) {
            log.padded_groups.push(g.index.clone());
        }
    }

    let mut completed = Frame::new(rows, source.extra_names().to_vec())?;
    let x = completed.x();
    let filled = interpolate(&x, config.x_method);
    let mut out_rows = completed.rows().to_vec();
    for (i, row) in out_rows.iter_mut().enumerate() {
        if row.x.is_none() {
            row.x = Some(filled[i]);
            log.imputed_x.push((row.index.clone(), row.grain, filled[i], config.x_method));
        }
    }
    completed = Frame::new(out_rows, completed.extra_names().to_vec())?;
    Ok((completed, log))
}

/// First group lacking leading grains, last group lacking trailing grains.
fn boundary_partial_groups(frame: &Frame, m: u32) -> Vec<IndexKey> {
    let groups = frame.groups();
    let mut out = Vec::new();
    if let Some(first) = groups.first() {
        let min_grain = frame.rows()[first.range()].iter().map(|r| r.grain).min().unwrap_or(1);
        if min_grain > 1 {
            out.push(first.index.clone());
        }
    }
    if let Some(last) = groups.last() {
        let max_grain = frame.rows()[last.range()].iter().map(|r| r.grain).max().unwrap_or(m);
        if max_grain < m && !out.contains(&last.index) {
            out.push(last.index.clone());
        }
    }
    out
}

/// Fills gaps over row position. Values outside the observed range take the
/// nearest observed value. Requires at least one observed entry.
pub fn interpolate(values: &[Option<f64>], method: InterpMethod) -> Vec<f64> {
    let observed: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    assert!(!observed.is_empty(), "interpolate needs at least one observed value");
    let first = observed[0];
    let last = *observed.last().unwrap();
    let mut out = Vec::with_capacity(values.len());
    // index into `observed` of the last observation at or before i
    let mut k = 0usize;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v {
            out.push(*v);
            continue;
        }
        if i < first {
            out.push(values[first].unwrap());
            continue;
        }
        if i > last {
            out.push(values[last].unwrap());
            continue;
        }
        while k + 1 < observed.len() && observed[k + 1] < i {
            k += 1;
        }
        let (lo, hi) = (observed[k], observed[k + 1]);
        let (vlo, vhi) = (values[lo].unwrap(), values[hi].unwrap());
        let filled = match method {
            InterpMethod::Linear => {
                let t = (i - lo) as f64 / (hi - lo) as f64;
                vlo + t * (vhi - vlo)
            }
            // ties go to the earlier observation
            InterpMethod::Nearest => {
                if i - lo <= hi - i {
                    vlo
                } else {
                    vhi
                }
            }
        };
        out.push(filled);
    }
    out
}
