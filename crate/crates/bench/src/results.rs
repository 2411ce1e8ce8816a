//! Result rows and their CSV encoding.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::BenchResult;

pub const CSV_HEADER: &str = "experiment,n,d,B,k,l,epsilon,delta,lr,loss,seed,rep,metric,value,wall_ms";

/// One metric at one parameter point. Unused parameters stay empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: &'static str,
    pub n: Option<usize>,
    pub d: Option<usize>,
    #[serde(rename = "B")]
    pub b: Option<f64>,
    pub k: Option<usize>,
    pub l: Option<usize>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub lr: Option<f64>,
    pub loss: Option<&'static str>,
    pub seed: u64,
    pub rep: usize,
    pub metric: String,
    pub value: f64,
    pub wall_ms: Option<f64>,
}

impl ResultRow {
    pub fn new(experiment: &'static str, seed: u64, rep: usize) -> Self {
        Self {
            experiment,
            n: None,
            d: None,
            b: None,
            k: None,
            l: None,
            epsilon: None,
            delta: None,
            lr: None,
            loss: None,
            seed,
            rep,
            metric: String::new(),
            value: 0.0,
            wall_ms: None,
        }
    }

    /// Copy of this parameter point carrying one metric.
    pub fn metric(&self, name: impl Into<String>, value: f64, wall_ms: Option<f64>) -> Self {
        Self { metric: name.into(), value, wall_ms, ..self.clone() }
    }
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> BenchResult<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_bytes(rows: &[ResultRow]) -> BenchResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(buf)
}

/// Writes a fresh file; an existing file is never overwritten.
pub fn write_csv_file(rows: &[ResultRow], path: &Path) -> BenchResult<()> {
    let file = OpenOptions::new().write(true).create_new(true).open(path)?;
    write_csv(rows, std::io::BufWriter::new(file))
}
