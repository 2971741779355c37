//! Dataset ingestion: CSV with a header `x0..x{d_in-1},y0..y{d_out-1}`.

use std::path::{Path, PathBuf};

use deltavar_core::bench::gen_dynamics;
use deltavar_core::models::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::floats::fmt_f64;

/// Where a command's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Csv(PathBuf),
    /// `k` ones followed by `n − k` zeros, no input columns.
    Bernoulli { n: usize, k: usize },
    /// Transition pairs of the toy dynamics system.
    Dynamics {
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_noise() -> f64 {
    0.01
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv(path) => read_csv(path),
            DataSource::Bernoulli { n, k } => {
                if k > n {
                    return Err(CliError::Config(format!("bernoulli data needs k <= n, got k={k}, n={n}")));
                }
                let ys: Vec<f64> = (0..*n).map(|i| if i < *k { 1.0 } else { 0.0 }).collect();
                Ok(Dataset::outcomes(&ys)?)
            }
            DataSource::Dynamics { n, seed, noise } => Ok(gen_dynamics(*seed, *n, *noise)?),
        }
    }
}

fn column_index(name: &str, prefix: char) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok()
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let bad = |msg: String| CliError::Failure(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = reader.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    let d_in = header.iter().take_while(|h| h.starts_with('x')).count();
    for (i, h) in header.iter().enumerate() {
        let ok = if i < d_in {
            column_index(h, 'x') == Some(i)
        } else {
            column_index(h, 'y') == Some(i - d_in)
        };
        if !ok {
            return Err(bad(format!("header must be x0..x{{d-1}},y0..y{{m-1}}, found '{h}' at column {i}")));
        }
    }
    let d_out = header.len() - d_in;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != header.len() {
            return Err(bad(format!("row {} has {} fields, expected {}", row + 1, rec.len(), header.len())));
        }
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| bad(format!("row {}: '{field}' is not a number", row + 1)))?;
            if i < d_in {
                inputs.push(v);
            } else {
                targets.push(v);
            }
        }
    }
    Dataset::from_flat(d_in, d_out, inputs, targets).map_err(|e| bad(e.to_string()))
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = (0..data.d_in())
        .map(|i| format!("x{i}"))
        .chain((0..data.d_out()).map(|i| format!("y{i}")))
        .collect();
    let fail = |e: csv::Error| CliError::Failure(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(fail)?;
    for i in 0..data.len() {
        let row: Vec<String> = data.input(i).iter().chain(data.target(i)).map(|v| fmt_f64(*v)).collect();
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(CliError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let data = gen_dynamics(3, 100, 0.01).unwrap();
        write_csv(&p, &data).unwrap();
        assert_eq!(read_csv(&p).unwrap(), data);
    }

    #[test]
    fn rejects_bad_headers_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x1,y0\n1,2\n").unwrap();
        assert!(read_csv(&p).is_err());
        std::fs::write(&p, "x0,y0\n1,abc\n").unwrap();
        assert!(read_csv(&p).is_err());
        std::fs::write(&p, "y0\n1\n0\n").unwrap();
        let d = read_csv(&p).unwrap();
        assert_eq!((d.d_in(), d.len()), (0, 2));
    }
}
