//! File formats: CSV input data, TOML experiment files, TSV and JSON reports.
//!
//! Reports are written with shortest round-trip float formatting and fixed row
//! order, so equal inputs always give byte-identical files.

use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Dataset, Matrix, Vector};
use crate::simulation::{CoverageReport, ExperimentConfig, QqSeries, RmseReport};

/// Schema tag written into every JSON summary.
pub const SCHEMA: &str = "incidental.report.v1";

/// A parsed input table: response in the first column, covariates after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub response: String,
    pub covariates: Vec<String>,
    pub data: Dataset,
}

/// Parses comma-separated data with a header row. The first column is `Y`,
/// the remaining columns form `X`. Errors carry 1-based line numbers.
pub fn read_csv<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(&e, 1))?.clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "need a response column and at least one covariate".into(),
        });
    }
    let width = header.len();
    let mut y = Vec::new();
    let mut x = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(&e, 0))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {}: `{field}` is not a number", k + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {}: value must be finite", k + 1),
                });
            }
            if k == 0 {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let data = Dataset::new(Matrix::from_row_slice(n, width - 1, &x), Vector::from_vec(y))?;
    Ok(Table {
        response: header[0].to_string(),
        covariates: header.iter().skip(1).map(str::to_string).collect(),
        data,
    })
}

fn csv_error(e: &csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("expected {expected_len} fields, found {len}")
        }
        csv::ErrorKind::Utf8 { .. } => "invalid UTF-8".into(),
        _ => e.to_string(),
    };
    Error::Parse { line, message }
}

/// Settings of the coverage suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSettings {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// `(p1, p2)` cells; empty means the mechanism as configured.
    #[serde(default)]
    pub cells: Vec<(f64, f64)>,
}

impl Default for CoverageSettings {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            cells: Vec::new(),
        }
    }
}

fn default_alpha() -> f64 {
    0.05
}

/// A suite run at one fixed lambda.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedLambda {
    pub lambda: f64,
}

/// Top-level layout of an experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub coverage: CoverageSettings,
    #[serde(default)]
    pub qq: Option<FixedLambda>,
    #[serde(default)]
    pub selection: Option<FixedLambda>,
}

/// Parses and validates a TOML experiment file.
pub fn parse_experiment_file(text: &str) -> Result<ExperimentFile> {
    let file: ExperimentFile = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    file.experiment.validate()?;
    Ok(file)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |l| l.to_string())
}

/// One row per method, target and lambda.
pub fn rmse_tsv(report: &RmseReport) -> String {
    let mut out = String::from("method\ttarget\tlambda\tcount\tbias\trmse\tbest\n");
    for m in &report.methods {
        for (k, p) in m.points.iter().enumerate() {
            for t in &p.targets {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    m.method.label(),
                    t.target,
                    fmt_opt(p.lambda),
                    p.count,
                    t.bias,
                    t.rmse,
                    u8::from(k == m.best)
                );
            }
        }
    }
    out
}

/// One row per cell and coefficient.
pub fn coverage_tsv(report: &CoverageReport) -> String {
    let mut out = String::from("p1\tp2\ttarget\tcount\tfailures\tcoverage\tstd_error\tmean_half_width\tmean_lambda\n");
    for c in &report.cells {
        for j in 0..c.coverage.len() {
            let _ = writeln!(
                out,
                "{}\t{}\tbeta{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.p1,
                c.p2,
                j + 1,
                c.count,
                c.failures,
                c.coverage[j],
                c.std_error[j],
                c.mean_half_width[j],
                c.mean_lambda
            );
        }
    }
    out
}

/// Two columns: sorted standardized draws and matching normal quantiles.
pub fn qq_tsv(series: &QqSeries) -> String {
    let mut out = String::from("empirical\ttheoretical\n");
    for (e, t) in series.sorted.iter().zip(&series.theoretical) {
        let _ = writeln!(out, "{e}\t{t}");
    }
    out
}

#[derive(Serialize)]
struct Summary<'a, C: Serialize, R: Serialize> {
    schema: &'static str,
    kind: &'a str,
    config: &'a C,
    report: &'a R,
}

/// Pretty JSON `{schema, kind, config, report}` with a trailing newline.
pub fn json_summary<C: Serialize, R: Serialize>(kind: &str, config: &C, report: &R) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Summary {
        schema: SCHEMA,
        kind,
        config,
        report,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
