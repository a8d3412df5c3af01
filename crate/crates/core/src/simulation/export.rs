//! CSV and JSON-lines exports of a Monte Carlo summary.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{Map, Value};

use super::mc::McSummary;
use crate::data::EstimatorKind;
use crate::error::{LateError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Export {
    /// One row per estimator: MSE ratio, absolute bias, coverage.
    Table,
    /// Per-replication complier-share estimates.
    Shares,
    /// Per-replication point estimates.
    Estimates,
}

impl Export {
    pub const ALL: [Export; 3] = [Export::Table, Export::Shares, Export::Estimates];

    pub fn stem(self) -> &'static str {
        match self {
            Export::Table => "table",
            Export::Shares => "shares",
            Export::Estimates => "estimates",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "jsonl",
        }
    }
}

impl FromStr for Format {
    type Err = LateError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" | "jsonl" => Ok(Format::Json),
            other => Err(LateError::InvalidArgument(format!("unknown format `{other}` (csv or json)"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

/// A rectangular table of optional numbers and strings.
pub(crate) struct Frame {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

pub(crate) enum Cell {
    Num(Option<f64>),
    Int(u64),
    Text(Option<String>),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(Some(v)) => v.to_string(),
            Cell::Int(v) => v.to_string(),
            Cell::Text(Some(s)) => s.clone(),
            Cell::Num(None) | Cell::Text(None) => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(Some(v)) if v.is_finite() => Value::from(*v),
            Cell::Int(v) => Value::from(*v),
            Cell::Text(Some(s)) => Value::from(s.clone()),
            _ => Value::Null,
        }
    }
}

impl Frame {
    pub fn write<W: Write>(&self, format: Format, mut out: W) -> Result<()> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(&self.header)?;
                for row in &self.rows {
                    w.write_record(row.iter().map(Cell::csv))?;
                }
                w.flush().map_err(|e| LateError::io("<output>", e))?;
            }
            Format::Json => {
                for row in &self.rows {
                    let obj: Map<String, Value> = self.header.iter().cloned().zip(row.iter().map(Cell::json)).collect();
                    serde_json::to_writer(&mut out, &obj)?;
                    writeln!(out).map_err(|e| LateError::io("<output>", e))?;
                }
            }
        }
        Ok(())
    }
}

fn table_frame(s: &McSummary) -> Frame {
    Frame {
        header: ["estimator", "mse_ratio", "abs_bias", "coverage"].map(String::from).to_vec(),
        rows: s
            .rows
            .iter()
            .map(|r| {
                vec![
                    Cell::Text(Some(r.kind.label().into())),
                    Cell::Num(Some(r.mse_ratio)),
                    Cell::Num(Some(r.abs_bias)),
                    Cell::Num(Some(r.coverage)),
                ]
            })
            .collect(),
    }
}

pub const SHARE_COLUMNS: [&str; 8] = [
    "iv_first_stage",
    "tnorm_denominator",
    "kappa1_ml",
    "kappa0_ml",
    "kappa_ml",
    "cb_denominator",
    "kappa1_cb",
    "kappa0_cb",
];

fn shares_frame(s: &McSummary) -> Frame {
    let mut header: Vec<String> = vec!["rep".into(), "seed".into()];
    header.extend(SHARE_COLUMNS.iter().map(|c| c.to_string()));
    header.extend(["n_z1_d0", "n_z0_d1", "failure"].map(String::from));
    let rows = s
        .records
        .iter()
        .map(|r| {
            let sh = &r.shares;
            let mut row = vec![Cell::Int(r.rep as u64), Cell::Int(r.seed)];
            row.extend(
                [
                    sh.iv_first_stage,
                    sh.tnorm_denominator,
                    sh.kappa1_ml,
                    sh.kappa0_ml,
                    sh.kappa_ml,
                    sh.cb_denominator,
                    sh.kappa1_cb,
                    sh.kappa0_cb,
                ]
                .map(Cell::Num),
            );
            row.push(Cell::Int(r.cells.z1_d0 as u64));
            row.push(Cell::Int(r.cells.z0_d1 as u64));
            row.push(Cell::Text(r.failure.clone()));
            row
        })
        .collect();
    Frame { header, rows }
}

fn estimates_frame(s: &McSummary) -> Frame {
    let kinds: Vec<EstimatorKind> = s.rows.iter().map(|r| r.kind).collect();
    let mut header: Vec<String> = vec!["rep".into(), "seed".into()];
    for k in &kinds {
        header.push(k.label().to_string());
        header.push(format!("{}_se", k.label()));
    }
    header.push("failure".into());
    let rows = s
        .records
        .iter()
        .map(|r| {
            let mut row = vec![Cell::Int(r.rep as u64), Cell::Int(r.seed)];
            for k in &kinds {
                let e = r.estimates.get(k);
                row.push(Cell::Num(e.map(|e| e.tau)));
                row.push(Cell::Num(e.map(|e| e.se)));
            }
            let mut why: Vec<String> = r.failure.iter().cloned().collect();
            why.extend(
                r.estimator_failures
                    .iter()
                    .filter(|(k, _)| kinds.contains(k))
                    .map(|(k, e)| format!("{k}: {e}")),
            );
            row.push(Cell::Text(if why.is_empty() { None } else { Some(why.join("; ")) }));
            row
        })
        .collect();
    Frame { header, rows }
}

/// Writes one export of `summary` to `out`.
pub fn export<W: Write>(summary: &McSummary, what: Export, format: Format, out: W) -> Result<()> {
    let frame = match what {
        Export::Table => table_frame(summary),
        Export::Shares => shares_frame(summary),
        Export::Estimates => estimates_frame(summary),
    };
    frame.write(format, out)
}

pub fn export_to_path(summary: &McSummary, what: Export, format: Format, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LateError::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    export(summary, what, format, &mut buf)?;
    buf.flush().map_err(|e| LateError::io(path, e))
}
