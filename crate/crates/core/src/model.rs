//! Observed-data table and the moment function defining the target functional.

use std::fmt;
use std::sync::Arc;

use crate::error::{MivError, Result};

/// Labels attached to each instrument level when Z was built from one or
/// more raw columns (Cartesian product of their categories).
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentEncoding {
    pub columns: Vec<String>,
    /// `labels[level][column]` is the raw category of that column.
    pub labels: Vec<Vec<String>>,
}

impl InstrumentEncoding {
    pub fn describe(&self, level: usize) -> String {
        self.columns
            .iter()
            .zip(&self.labels[level])
            .map(|(c, l)| format!("{c}={l}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Sample of `O = (X, Z, R, RY)`.
///
/// `y[i]` is `None` exactly when the outcome was not observed; it is never a
/// sentinel number. Fields are public so malformed tables can be built and
/// diagnosed with [`validate_table`]; [`ObservationTable::new`] builds and
/// validates in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    /// Number of covariates.
    pub p: usize,
    /// Row-major `n x p` covariate matrix.
    pub x: Vec<f64>,
    pub z: Vec<usize>,
    pub levels: usize,
    pub r: Vec<bool>,
    pub y: Vec<Option<f64>>,
    pub encoding: Option<InstrumentEncoding>,
}

#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub x: &'a [f64],
    pub z: usize,
    pub r: bool,
    pub y: Option<f64>,
}

impl ObservationTable {
    pub fn new(
        x: Vec<f64>,
        p: usize,
        z: Vec<usize>,
        levels: usize,
        r: Vec<bool>,
        y: Vec<Option<f64>>,
    ) -> Result<Self> {
        let table = Self {
            p,
            x,
            z,
            levels,
            r,
            y,
            encoding: None,
        };
        let violations = validate_table(&table);
        if violations.is_empty() {
            Ok(table)
        } else {
            Err(MivError::DataContract(
                violations
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    pub fn with_encoding(mut self, encoding: InstrumentEncoding) -> Self {
        self.encoding = Some(encoding);
        self
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    /// Number of incomplete cases (`R = 0`).
    pub fn n0(&self) -> usize {
        self.r.iter().filter(|&&r| !r).count()
    }

    pub fn row(&self, i: usize) -> Row<'_> {
        Row {
            x: &self.x[i * self.p..(i + 1) * self.p],
            z: self.z[i],
            r: self.r[i],
            y: self.y[i],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> + '_ {
        (0..self.n()).map(move |i| self.row(i))
    }

    /// Copies the listed rows, keeping the declared level set.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut x = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            x.extend_from_slice(self.row(i).x);
        }
        Self {
            p: self.p,
            x,
            z: idx.iter().map(|&i| self.z[i]).collect(),
            levels: self.levels,
            r: idx.iter().map(|&i| self.r[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            encoding: self.encoding.clone(),
        }
    }

    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.levels];
        for &z in &self.z {
            if z < self.levels {
                counts[z] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    Shape(String),
    YPresentUnderR0 { rows: Vec<usize> },
    YMissingUnderR1 { rows: Vec<usize> },
    NonFiniteOutcome { rows: Vec<usize> },
    ZOutOfRange { rows: Vec<usize> },
    EmptyLevel { level: usize },
    MissingCovariate { rows: Vec<usize> },
}

fn fmt_rows(rows: &[usize]) -> String {
    const SHOW: usize = 10;
    let mut s = rows
        .iter()
        .take(SHOW)
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    if rows.len() > SHOW {
        s.push_str(&format!(", ... ({} rows)", rows.len()));
    }
    s
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "table has no rows"),
            Violation::Shape(msg) => write!(f, "inconsistent column lengths: {msg}"),
            Violation::YPresentUnderR0 { rows } => {
                write!(f, "Y present under R=0 at rows [{}]", fmt_rows(rows))
            }
            Violation::YMissingUnderR1 { rows } => {
                write!(f, "Y missing under R=1 at rows [{}]", fmt_rows(rows))
            }
            Violation::NonFiniteOutcome { rows } => {
                write!(f, "non-finite Y at rows [{}]", fmt_rows(rows))
            }
            Violation::ZOutOfRange { rows } => {
                write!(f, "Z code out of range at rows [{}]", fmt_rows(rows))
            }
            Violation::EmptyLevel { level } => write!(f, "Z level {level} never appears"),
            Violation::MissingCovariate { rows } => {
                write!(f, "missing covariate entries at rows [{}]", fmt_rows(rows))
            }
        }
    }
}

/// Lists every violated table invariant; empty means the table is well formed.
pub fn validate_table(table: &ObservationTable) -> Vec<Violation> {
    let n = table.r.len();
    let mut out = Vec::new();
    if n == 0 {
        out.push(Violation::Empty);
        return out;
    }
    if table.y.len() != n || table.z.len() != n || table.x.len() != n * table.p {
        out.push(Violation::Shape(format!(
            "r={n}, y={}, z={}, x={} (p={})",
            table.y.len(),
            table.z.len(),
            table.x.len(),
            table.p
        )));
        return out;
    }

    let mut y_under_r0 = Vec::new();
    let mut y_missing = Vec::new();
    let mut y_nonfinite = Vec::new();
    let mut z_range = Vec::new();
    let mut x_missing = Vec::new();
    for i in 0..n {
        let row = table.row(i);
        match (row.r, row.y) {
            (false, Some(_)) => y_under_r0.push(i),
            (true, None) => y_missing.push(i),
            (true, Some(y)) if !y.is_finite() => y_nonfinite.push(i),
            _ => {}
        }
        if row.z >= table.levels {
            z_range.push(i);
        }
        if row.x.iter().any(|v| !v.is_finite()) {
            x_missing.push(i);
        }
    }
    if !y_under_r0.is_empty() {
        out.push(Violation::YPresentUnderR0 { rows: y_under_r0 });
    }
    if !y_missing.is_empty() {
        out.push(Violation::YMissingUnderR1 { rows: y_missing });
    }
    if !y_nonfinite.is_empty() {
        out.push(Violation::NonFiniteOutcome { rows: y_nonfinite });
    }
    if !z_range.is_empty() {
        out.push(Violation::ZOutOfRange { rows: z_range });
    }
    for (level, count) in table.level_counts().into_iter().enumerate() {
        if count == 0 {
            out.push(Violation::EmptyLevel { level });
        }
    }
    if !x_missing.is_empty() {
        out.push(Violation::MissingCovariate { rows: x_missing });
    }
    out
}

/// User-supplied moment function `h(y, psi)`.
#[derive(Clone)]
pub struct CustomMoment {
    pub name: String,
    pub h: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomMoment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomMoment")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum FunctionalKind {
    Mean,
    Quantile { q: f64 },
    Custom(CustomMoment),
}

/// Moment function `h(y; psi)` whose conditional mean among nonrespondents
/// is the target `beta = E[h(Y; psi) | R = 0]`.
#[derive(Debug, Clone)]
pub struct FunctionalSpec {
    pub kind: FunctionalKind,
    pub psi: f64,
}

impl FunctionalSpec {
    /// `h(y; 0) = y`, so `beta` is the nonrespondent mean.
    pub fn mean() -> Self {
        Self {
            kind: FunctionalKind::Mean,
            psi: 0.0,
        }
    }

    pub fn quantile(q: f64, psi: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(MivError::Config(format!(
                "quantile level must lie in (0, 1), got {q}"
            )));
        }
        Ok(Self {
            kind: FunctionalKind::Quantile { q },
            psi,
        })
    }

    pub fn custom(
        name: impl Into<String>,
        psi: f64,
        h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind: FunctionalKind::Custom(CustomMoment {
                name: name.into(),
                h: Arc::new(h),
            }),
            psi,
        }
    }

    pub fn with_psi(&self, psi: f64) -> Self {
        Self {
            kind: self.kind.clone(),
            psi,
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            FunctionalKind::Mean => "mean".into(),
            FunctionalKind::Quantile { q } => format!("quantile(q={q})"),
            FunctionalKind::Custom(c) => format!("custom({})", c.name),
        }
    }
}

pub fn evaluate_h(spec: &FunctionalSpec, y: f64) -> f64 {
    match &spec.kind {
        FunctionalKind::Mean => y - spec.psi,
        FunctionalKind::Quantile { q } => {
            if y >= spec.psi {
                1.0 - q
            } else {
                -q
            }
        }
        FunctionalKind::Custom(c) => (c.h)(y, spec.psi),
    }
}

/// `R * h(Y; psi)`, which is literally zero when the outcome is absent.
pub fn response_moment(spec: &FunctionalSpec, row: &Row<'_>) -> f64 {
    match (row.r, row.y) {
        (true, Some(y)) => evaluate_h(spec, y),
        _ => 0.0,
    }
}
