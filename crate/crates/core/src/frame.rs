//! Long-format input table: one row per (index, grain) pair.
//!
//! The low-frequency target `y` is repeated on every high-frequency row of
//! its group; the indicator `X` varies per row. Columns after the first four
//! are carried along as named numeric extras (`y_true`, `y_hat`, auxiliary
//! predictors, ...).

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

const REQUIRED_COLUMNS: [&str; 4] = ["index", "grain", "y", "x"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("malformed header: expected `index,grain,y,X` as the first columns, got `{0}`")]
    MalformedHeader(String),
    #[error("row {row}: column `{column}` is not numeric: `{value}`")]
    NonNumericField { row: usize, column: String, value: String },
    #[error("row {row}: missing {column}")]
    MissingKey { row: usize, column: String },
    #[error("row {row}: grain must be >= 1, got {grain}")]
    InvalidGrain { row: usize, grain: i64 },
    #[error("duplicate key (index={index}, grain={grain})")]
    DuplicateKey { index: IndexKey, grain: u32 },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("column `{name}` has length {found}, expected {expected}")]
    LengthMismatch { name: String, expected: usize, found: usize },
    #[error("csv: {0}")]
    Csv(String),
}

/// Group key. Integer keys order numerically, text keys lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum IndexKey {
    Int(i64),
    Text(String),
}

impl Ord for IndexKey {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (IndexKey::Int(a), IndexKey::Int(b)) => a.cmp(b),
            (IndexKey::Text(a), IndexKey::Text(b)) => a.cmp(b),
            (IndexKey::Int(_), IndexKey::Text(_)) => Ordering::Less,
            (IndexKey::Text(_), IndexKey::Int(_)) => Ordering::Greater,
        }
    }
}

impl PartialOrd for IndexKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for IndexKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexKey::Int(v) => write!(f, "{v}"),
            IndexKey::Text(s) => f.write_str(s),
        }
    }
}

impl From<i64> for IndexKey {
    fn from(v: i64) -> Self {
        IndexKey::Int(v)
    }
}

impl From<&str> for IndexKey {
    fn from(s: &str) -> Self {
        IndexKey::Text(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub index: IndexKey,
    pub grain: u32,
    pub y: Option<f64>,
    pub x: Option<f64>,
    /// Values of the extra columns, aligned with [`Frame::extra_names`].
    pub extra: Vec<Option<f64>>,
}

impl Row {
    pub fn new(index: impl Into<IndexKey>, grain: u32, y: Option<f64>, x: Option<f64>) -> Self {
        Row { index: index.into(), grain, y, x, extra: Vec::new() }
    }

    fn key_cmp(&self, other: &Row) -> Ordering {
        self.index.cmp(&other.index).then(self.grain.cmp(&other.grain))
    }
}

/// Contiguous run of rows sharing one index value.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub index: IndexKey,
    pub start: usize,
    pub len: usize,
}

impl Group {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Validated, sorted long-format table. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    rows: Vec<Row>,
    extra_names: Vec<String>,
    groups: Vec<Group>,
}

impl Frame {
    /// Sorts rows by (index, grain) and rejects duplicate keys or grain 0.
    pub fn new(mut rows: Vec<Row>, extra_names: Vec<String>) -> Result<Frame, FrameError> {
        for (i, row) in rows.iter_mut().enumerate() {
            if row.grain < 1 {
                return Err(FrameError::InvalidGrain { row: i + 1, grain: row.grain as i64 });
            }
            if row.extra.len() != extra_names.len() {
                if row.extra.is_empty() {
                    row.extra = vec![None; extra_names.len()];
                } else {
                    return Err(FrameError::LengthMismatch {
                        name: "extra".into(),
                        expected: extra_names.len(),
                        found: row.extra.len(),
                    });
                }
            }
        }
        rows.sort_by(|a, b| a.key_cmp(b));
        for pair in rows.windows(2) {
            if pair[0].key_cmp(&pair[1]) == Ordering::Equal {
                return Err(FrameError::DuplicateKey {
                    index: pair[1].index.clone(),
                    grain: pair[1].grain,
                });
            }
        }
        let groups = group_rows(&rows);
        Ok(Frame { rows, extra_names, groups })
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn extra_names(&self) -> &[String] {
        &self.extra_names
    }

    /// Largest grain observed anywhere in the frame (0 when empty).
    pub fn max_grain(&self) -> u32 {
        self.rows.iter().map(|r| r.grain).max().unwrap_or(0)
    }

    /// One target per group: the first non-missing `y` in the group.
    pub fn group_targets(&self) -> Vec<Option<f64>> {
        self.groups
            .iter()
            .map(|g| self.rows[g.range()].iter().find_map(|r| r.y))
            .collect()
    }

    pub fn x(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.x).collect()
    }

    /// Indicator values, or `None` if any is missing.
    pub fn x_complete(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.x).collect()
    }

    pub fn extra_position(&self, name: &str) -> Option<usize> {
        self.extra_names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    pub fn extra(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let pos = self.extra_position(name)?;
        Some(self.rows.iter().map(|r| r.extra[pos]).collect())
    }

    /// Returns a copy with `y` overwritten on every row of each group whose
    /// entry in `targets` is `Some`.
    pub fn with_group_targets(&self, targets: &[Option<f64>]) -> Frame {
        let mut rows = self.rows.clone();
        for (g, target) in self.groups.iter().zip(targets) {
            if let Some(t) = target {
                for row in &mut rows[g.range()] {
                    row.y = Some(*t);
                }
            }
        }
        Frame { rows, extra_names: self.extra_names.clone(), groups: self.groups.clone() }
    }

    /// Returns a copy keeping only rows whose group index is not in `drop`.
    pub fn without_groups(&self, drop: &[IndexKey]) -> Frame {
        let rows: Vec<Row> =
            self.rows.iter().filter(|r| !drop.contains(&r.index)).cloned().collect();
        let groups = group_rows(&rows);
        Frame { rows, extra_names: self.extra_names.clone(), groups }
    }

    /// Replaces (or appends) a numeric extra column.
    pub fn with_extra(&self, name: &str, values: &[f64]) -> Result<Frame, FrameError> {
        if values.len() != self.n() {
            return Err(FrameError::LengthMismatch {
                name: name.to_string(),
                expected: self.n(),
                found: values.len(),
            });
        }
        let mut out = self.clone();
        let pos = match out.extra_position(name) {
            Some(p) => p,
            None => {
                out.extra_names.push(name.to_string());
                for row in &mut out.rows {
                    row.extra.push(None);
                }
                out.extra_names.len() - 1
            }
        };
        for (row, v) in out.rows.iter_mut().zip(values) {
            row.extra[pos] = Some(*v);
        }
        Ok(out)
    }
}

fn group_rows(rows: &[Row]) -> Vec<Group> {
    let mut groups: Vec<Group> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if g.index == row.index => g.len += 1,
            _ => groups.push(Group { index: row.index.clone(), start: i, len: 1 }),
        }
    }
    groups
}

fn parse_optional(raw: &str, row: usize, column: &str) -> Result<Option<f64>, FrameError> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| FrameError::NonNumericField {
        row,
        column: column.to_string(),
        value: s.to_string(),
    })
}

/// Parses CSV text whose first four columns are `index,grain,y,X`.
pub fn parse_csv(bytes: &[u8]) -> Result<Frame, FrameError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(bytes);
    let header = reader.headers().map_err(|e| FrameError::Csv(e.to_string()))?.clone();
    let names: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    let header_ok = names.len() >= REQUIRED_COLUMNS.len()
        && names.iter().zip(REQUIRED_COLUMNS).all(|(got, want)| got.eq_ignore_ascii_case(want));
    if !header_ok {
        return Err(FrameError::MalformedHeader(names.join(",")));
    }
    let extra_names: Vec<String> = names[REQUIRED_COLUMNS.len()..].to_vec();
    let mut seen = HashSet::new();
    for name in &names {
        if name.is_empty() || !seen.insert(name.to_ascii_lowercase()) {
            return Err(FrameError::MalformedHeader(names.join(",")));
        }
    }

    let mut raw_index = Vec::new();
    let mut partial = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        let record = record.map_err(|e| FrameError::Csv(e.to_string()))?;
        if record.len() != names.len() {
            return Err(FrameError::RaggedRow {
                row: row_no,
                expected: names.len(),
                found: record.len(),
            });
        }
        let index = record[0].trim();
        if index.is_empty() {
            return Err(FrameError::MissingKey { row: row_no, column: "index".into() });
        }
        let grain_raw = record[1].trim();
        if grain_raw.is_empty() {
            return Err(FrameError::MissingKey { row: row_no, column: "grain".into() });
        }
        let grain: i64 = grain_raw.parse().map_err(|_| FrameError::NonNumericField {
            row: row_no,
            column: "grain".into(),
            value: grain_raw.to_string(),
        })?;
        if grain < 1 || grain > u32::MAX as i64 {
            return Err(FrameError::InvalidGrain { row: row_no, grain });
        }
        let y = parse_optional(&record[2], row_no, "y")?;
        let x = parse_optional(&record[3], row_no, "X")?;
        let extra = extra_names
            .iter()
            .enumerate()
            .map(|(k, name)| parse_optional(&record[4 + k], row_no, name))
            .collect::<Result<Vec<_>, _>>()?;
        raw_index.push(index.to_string());
        partial.push((grain as u32, y, x, extra));
    }

    let all_int = raw_index.iter().all(|s| s.parse::<i64>().is_ok());
    let rows = raw_index
        .into_iter()
        .zip(partial)
        .map(|(idx, (grain, y, x, extra))| {
            let index = if all_int {
                IndexKey::Int(idx.parse().expect("checked above"))
            } else {
                IndexKey::Text(idx)
            };
            Row { index, grain, y, x, extra }
        })
        .collect();
    Frame::new(rows, extra_names)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the frame (including its carried extras) followed by `extras`.
/// An extra whose name matches an existing column replaces it in place.
pub fn write_csv(frame: &Frame, extras: &[(&str, &[f64])]) -> Result<Vec<u8>, FrameError> {
    let mut out = frame.clone();
    for (name, values) in extras {
        out = out.with_extra(name, values)?;
    }
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["index".to_string(), "grain".into(), "y".into(), "X".into()];
    header.extend(out.extra_names.iter().cloned());
    writer.write_record(&header).map_err(|e| FrameError::Csv(e.to_string()))?;
    for row in &out.rows {
        let mut rec = vec![row.index.to_string(), row.grain.to_string(), fmt_opt(row.y), fmt_opt(row.x)];
        rec.extend(row.extra.iter().map(|v| fmt_opt(*v)));
        writer.write_record(&rec).map_err(|e| FrameError::Csv(e.to_string()))?;
    }
    writer.into_inner().map_err(|e| FrameError::Csv(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FindingCode {
    MalformedHeader,
    NonNumericField,
    MissingKey,
    InvalidGrain,
    DuplicateKey,
    InconsistentGroupTarget,
    AllXMissing,
    EmptyFrame,
    MissingSubPeriod,
    MissingGroupTarget,
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub code: FindingCode,
    pub message: String,
    pub index: Option<IndexKey>,
    pub grain: Option<u32>,
}

impl Finding {
    fn new(code: FindingCode, message: String) -> Self {
        Finding { code, message, index: None, grain: None }
    }

    fn at(mut self, index: &IndexKey, grain: Option<u32>) -> Self {
        self.index = Some(index.clone());
        self.grain = grain;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<Finding>,
    pub warnings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_accepted(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks the frame invariants. Never fails; all findings are reported.
pub fn validate(frame: &Frame) -> ValidationReport {
    let mut report = ValidationReport::default();
    if frame.is_empty() {
        report.warnings.push(Finding::new(FindingCode::EmptyFrame, "frame has no rows".into()));
        return report;
    }
    for pair in frame.rows.windows(2) {
        if pair[0].key_cmp(&pair[1]) == Ordering::Equal {
            report.errors.push(
                Finding::new(FindingCode::DuplicateKey, "duplicate (index, grain)".into())
                    .at(&pair[1].index, Some(pair[1].grain)),
            );
        }
    }
    for row in &frame.rows {
        if row.grain < 1 {
            report.errors.push(
                Finding::new(FindingCode::InvalidGrain, "grain must be >= 1".into())
                    .at(&row.index, Some(row.grain)),
            );
        }
    }
    if frame.rows.iter().all(|r| r.x.is_none()) {
        report
            .errors
            .push(Finding::new(FindingCode::AllXMissing, "indicator X is missing on every row".into()));
    }
    let m = frame.max_grain();
    for g in &frame.groups {
        let rows = &frame.rows[g.range()];
        let mut target: Option<f64> = None;
        for row in rows {
            if let Some(y) = row.y {
                match target {
                    None => target = Some(y),
                    Some(t) if t.to_bits() != y.to_bits() && t != y => {
                        report.errors.push(
                            Finding::new(
                                FindingCode::InconsistentGroupTarget,
                                format!("y={y} differs from group value {t}"),
                            )
                            .at(&g.index, Some(row.grain)),
                        );
                    }
                    _ => {}
                }
            }
        }
        if target.is_none() {
            report.warnings.push(
                Finding::new(FindingCode::MissingGroupTarget, "y missing for the whole group".into())
                    .at(&g.index, None),
            );
        }
        let present: HashSet<u32> = rows.iter().map(|r| r.grain).collect();
        for grain in 1..=m {
            if !present.contains(&grain) {
                report.warnings.push(
                    Finding::new(FindingCode::MissingSubPeriod, format!("sub-period {grain} absent"))
                        .at(&g.index, Some(grain)),
                );
            }
        }
    }
    report
}

/// Parses and validates in one step, turning parse failures into findings.
pub fn validate_csv(bytes: &[u8]) -> (Option<Frame>, ValidationReport) {
    match parse_csv(bytes) {
        Ok(frame) => {
            let report = validate(&frame);
            (Some(frame), report)
        }
        Err(err) => {
            let code = match &err {
                FrameError::MalformedHeader(_) | FrameError::Csv(_) | FrameError::RaggedRow { .. } => {
                    FindingCode::MalformedHeader
                }
                FrameError::NonNumericField { .. } => FindingCode::NonNumericField,
                FrameError::MissingKey { .. } => FindingCode::MissingKey,
                FrameError::InvalidGrain { .. } => FindingCode::InvalidGrain,
                FrameError::DuplicateKey { .. } => FindingCode::DuplicateKey,
                FrameError::LengthMismatch { .. } => FindingCode::MalformedHeader,
            };
            let mut finding = Finding::new(code, err.to_string());
            if let FrameError::DuplicateKey { index, grain } = &err {
                finding = finding.at(index, Some(*grain));
            }
            (None, ValidationReport { errors: vec![finding], warnings: Vec::new() })
        }
    }
}
