//! CSV ingestion: comma-separated, header row, UTF-8, empty cell = missing.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use miv_core::model::InstrumentEncoding;
use miv_core::stats::quantile_sorted;
use miv_core::ObservationTable;

use crate::config::{DataConfig, Discretize, InstrumentMode, OutcomePolicy};
use crate::error::{CliError, CliResult};

/// Raw cells of a CSV file, trimmed of surrounding whitespace.
#[derive(Debug, Clone)]
pub struct Frame {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Frame {
    pub fn read(path: &Path) -> CliResult<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: Read>(reader: R) -> CliResult<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::Data(format!("cannot read header row: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();
        if headers.iter().all(String::is_empty) {
            return Err(CliError::Data("missing header row".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CliError::Data(format!("data row {}: {e}", i + 1)))?;
            rows.push(rec.iter().map(str::to_owned).collect());
        }
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str) -> CliResult<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("column '{name}' not found in the header")))
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub table: ObservationTable,
    pub instruments: Vec<String>,
    pub covariates: Vec<String>,
    pub warnings: Vec<String>,
    /// Rows (0-based) whose outcome was dropped because the response flag was 0.
    pub masked_rows: Vec<usize>,
}

/// Builds one table from all instrument columns, combined by level product.
pub fn ingest_csv(path: &Path, cfg: &DataConfig) -> CliResult<Ingested> {
    ingest_frame(&Frame::read(path)?, cfg, &cfg.instruments)
}

/// One table per analysis, following `cfg.instrument_mode`.
pub fn ingest_analyses(path: &Path, cfg: &DataConfig) -> CliResult<Vec<Ingested>> {
    let frame = Frame::read(path)?;
    match cfg.instrument_mode {
        InstrumentMode::Product => Ok(vec![ingest_frame(&frame, cfg, &cfg.instruments)?]),
        InstrumentMode::PerInstrument => cfg
            .instruments
            .iter()
            .map(|c| ingest_frame(&frame, cfg, std::slice::from_ref(c)))
            .collect(),
    }
}

fn list_rows(rows: &[usize]) -> String {
    const SHOWN: usize = 10;
    let head: Vec<String> = rows
        .iter()
        .take(SHOWN)
        .map(|r| (r + 1).to_string())
        .collect();
    let mut s = format!("data rows {}", head.join(", "));
    if rows.len() > SHOWN {
        s.push_str(&format!(" and {} more", rows.len() - SHOWN));
    }
    s
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn ingest_frame(
    frame: &Frame,
    cfg: &DataConfig,
    instruments: &[String],
) -> CliResult<Ingested> {
    let n = frame.rows.len();
    if n == 0 {
        return Err(CliError::Data("the file has no data rows".into()));
    }
    let cell = |row: usize, col: usize| frame.rows[row].get(col).map(String::as_str).unwrap_or("");
    let mut warnings = Vec::new();

    let rc = frame.column(&cfg.response)?;
    let mut bad = Vec::new();
    let r: Vec<bool> = (0..n)
        .map(|i| match cell(i, rc) {
            "1" => true,
            "0" => false,
            _ => {
                bad.push(i);
                false
            }
        })
        .collect();
    if !bad.is_empty() {
        return Err(CliError::Data(format!(
            "response column '{}' must contain only 0 or 1 ({})",
            cfg.response,
            list_rows(&bad)
        )));
    }

    let yc = frame.column(&cfg.outcome)?;
    let (mut non_numeric, mut missing, mut under_zero) = (Vec::new(), Vec::new(), Vec::new());
    let mut y: Vec<Option<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let c = cell(i, yc);
        let value = if c.is_empty() {
            None
        } else if let Some(v) = parse_number(c) {
            Some(v)
        } else {
            non_numeric.push(i);
            None
        };
        match (r[i], value) {
            (true, None) if c.is_empty() => missing.push(i),
            (false, Some(_)) => under_zero.push(i),
            _ => {}
        }
        y.push(if r[i] { value } else { None });
    }
    if !non_numeric.is_empty() {
        return Err(CliError::Data(format!(
            "outcome column '{}' has non-numeric cells ({})",
            cfg.outcome,
            list_rows(&non_numeric)
        )));
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "outcome missing where the response flag is 1 ({})",
            list_rows(&missing)
        )));
    }
    if !under_zero.is_empty() {
        match cfg.outcome_under_nonresponse {
            OutcomePolicy::Error => {
                return Err(CliError::Data(format!(
                    "outcome present where the response flag is 0 ({})",
                    list_rows(&under_zero)
                )))
            }
            OutcomePolicy::Mask => warnings.push(format!(
                "masked outcome present where the response flag is 0 ({})",
                list_rows(&under_zero)
            )),
        }
    }

    let p = cfg.covariates.len();
    let mut x = vec![0.0; n * p];
    for (j, name) in cfg.covariates.iter().enumerate() {
        let col = frame.column(name)?;
        let (mut missing, mut invalid) = (Vec::new(), Vec::new());
        for i in 0..n {
            let c = cell(i, col);
            if c.is_empty() {
                missing.push(i);
            } else if let Some(v) = parse_number(c) {
                x[i * p + j] = v;
            } else {
                invalid.push(i);
            }
        }
        if !missing.is_empty() {
            return Err(CliError::Data(format!(
                "covariate '{name}' has missing cells ({})",
                list_rows(&missing)
            )));
        }
        if !invalid.is_empty() {
            return Err(CliError::Data(format!(
                "covariate '{name}' has non-numeric cells ({})",
                list_rows(&invalid)
            )));
        }
    }

    let mut codings = Vec::with_capacity(instruments.len());
    for name in instruments {
        let col = frame.column(name)?;
        let cells: Vec<&str> = (0..n).map(|i| cell(i, col)).collect();
        let empty: Vec<usize> = (0..n).filter(|&i| cells[i].is_empty()).collect();
        if !empty.is_empty() {
            return Err(CliError::Data(format!(
                "instrument '{name}' has missing cells ({})",
                list_rows(&empty)
            )));
        }
        let coding = code_instrument(name, &cells, cfg.rule(name))?;
        warnings.extend(coding.warning.clone());
        codings.push(coding);
    }
    let (z, encoding) = combine(instruments, &codings, n);
    let levels = encoding.labels.len();

    let table = ObservationTable::new(x, p, z, levels, r, y)
        .map_err(|e| CliError::Data(e.to_string()))?
        .with_encoding(encoding);
    Ok(Ingested {
        table,
        instruments: instruments.to_vec(),
        covariates: cfg.covariates.clone(),
        warnings,
        masked_rows: under_zero,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnCoding {
    pub codes: Vec<usize>,
    pub labels: Vec<String>,
    pub warning: Option<String>,
}

/// Codes one raw instrument column. Errors if it ends up with a single level.
pub fn code_instrument(name: &str, cells: &[&str], rule: Discretize) -> CliResult<ColumnCoding> {
    let numbers: Option<Vec<f64>> = cells.iter().map(|c| parse_number(c)).collect();
    let coding = match (rule, numbers) {
        (Discretize::Quartile, None) => {
            return Err(CliError::Data(format!(
                "instrument '{name}' has non-numeric cells and cannot be binned at quartiles"
            )))
        }
        (Discretize::Quartile, Some(v)) => quartile_bins(name, &v),
        (Discretize::Auto, Some(v)) if distinct_count(&v) > 4 => quartile_bins(name, &v),
        (_, Some(v)) => numeric_categories(&v),
        (_, None) => text_categories(cells),
    };
    if coding.labels.len() < 2 {
        return Err(CliError::Data(format!(
            "instrument '{name}' is constant, so it cannot shift the response probability"
        )));
    }
    Ok(coding)
}

fn distinct_count(v: &[f64]) -> usize {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.len()
}

fn numeric_categories(v: &[f64]) -> ColumnCoding {
    let mut levels = v.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    ColumnCoding {
        codes: v
            .iter()
            .map(|x| {
                levels
                    .binary_search_by(|l| l.total_cmp(x))
                    .expect("present")
            })
            .collect(),
        labels: levels.iter().map(|l| l.to_string()).collect(),
        warning: None,
    }
}

fn text_categories(cells: &[&str]) -> ColumnCoding {
    let mut levels: Vec<&str> = cells.to_vec();
    levels.sort_unstable();
    levels.dedup();
    ColumnCoding {
        codes: cells
            .iter()
            .map(|c| levels.binary_search(c).expect("present"))
            .collect(),
        labels: levels.iter().map(|l| l.to_string()).collect(),
        warning: None,
    }
}

/// Right-closed bins at the three quartiles; empty bins are dropped.
pub fn quartile_bins(name: &str, v: &[f64]) -> ColumnCoding {
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut cuts: Vec<f64> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&p| quantile_sorted(&sorted, p))
        .collect();
    cuts.dedup();
    let raw: Vec<usize> = v
        .iter()
        .map(|x| cuts.iter().filter(|&&c| *x > c).count())
        .collect();
    let mut used = vec![false; cuts.len() + 1];
    for &b in &raw {
        used[b] = true;
    }
    let mut remap = vec![usize::MAX; used.len()];
    let mut labels = Vec::new();
    for b in 0..used.len() {
        if used[b] {
            remap[b] = labels.len();
            let lo = if b == 0 {
                "-inf".to_string()
            } else {
                cuts[b - 1].to_string()
            };
            labels.push(if b == cuts.len() {
                format!("({lo}, inf)")
            } else {
                format!("({lo}, {}]", cuts[b])
            });
        }
    }
    let warning = (labels.len() < 4).then(|| {
        format!(
            "instrument '{name}': tied quartiles leave {} of 4 bins",
            labels.len()
        )
    });
    ColumnCoding {
        codes: raw.iter().map(|&b| remap[b]).collect(),
        labels,
        warning,
    }
}

/// Levels are the observed combinations, in lexicographic order of the column codes.
fn combine(
    names: &[String],
    codings: &[ColumnCoding],
    n: usize,
) -> (Vec<usize>, InstrumentEncoding) {
    let keys: Vec<Vec<usize>> = (0..n)
        .map(|i| codings.iter().map(|c| c.codes[i]).collect())
        .collect();
    let mut index: BTreeMap<&[usize], usize> = keys.iter().map(|k| (k.as_slice(), 0)).collect();
    for (level, v) in index.values_mut().enumerate() {
        *v = level;
    }
    let labels = index
        .keys()
        .map(|k| {
            k.iter()
                .zip(codings)
                .map(|(&code, c)| c.labels[code].clone())
                .collect()
        })
        .collect();
    let z = keys.iter().map(|k| index[k.as_slice()]).collect();
    (
        z,
        InstrumentEncoding {
            columns: names.to_vec(),
            labels,
        },
    )
}

/// Column names used by [`write_table_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnNames {
    pub covariates: Vec<String>,
    pub instrument: String,
    pub response: String,
    pub outcome: String,
}

impl ColumnNames {
    pub fn default_for(table: &ObservationTable) -> Self {
        Self {
            covariates: (1..=table.p).map(|j| format!("x{j}")).collect(),
            instrument: "z".into(),
            response: "r".into(),
            outcome: "y".into(),
        }
    }

    /// A data section that reads the written file back with the same level codes.
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            outcome: self.outcome.clone(),
            response: self.response.clone(),
            instruments: vec![self.instrument.clone()],
            covariates: self.covariates.clone(),
            discretize: [(self.instrument.clone(), Discretize::Categorical)].into(),
            instrument_mode: InstrumentMode::Product,
            outcome_under_nonresponse: OutcomePolicy::Error,
        }
    }
}

/// Writes covariates, the instrument code, the response flag and the outcome
/// (empty when unobserved). Values are printed in shortest round-trip form.
pub fn write_table_csv<W: Write>(
    table: &ObservationTable,
    names: &ColumnNames,
    writer: W,
) -> CliResult<()> {
    if names.covariates.len() != table.p {
        return Err(CliError::Config(format!(
            "{} covariate names for {} covariates",
            names.covariates.len(),
            table.p
        )));
    }
    let io = |e: csv::Error| CliError::Output {
        path: "csv output".into(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = names.covariates.iter().map(String::as_str).collect();
    header.extend([names.instrument.as_str(), &names.response, &names.outcome]);
    w.write_record(&header).map_err(io)?;
    for row in table.rows() {
        let mut rec: Vec<String> = row.x.iter().map(|v| v.to_string()).collect();
        rec.push(row.z.to_string());
        rec.push(u8::from(row.r).to_string());
        rec.push(row.y.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Output {
        path: "csv output".into(),
        source: e,
    })
}
