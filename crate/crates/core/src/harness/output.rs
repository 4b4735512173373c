use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One aggregated point of a Monte-Carlo sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep: String,
    #[serde(rename = "det_err_prob")]
    pub detection_error_probability: f64,
    pub ghost_rate: f64,
    #[serde(rename = "mean_runtime_s")]
    pub mean_runtime: f64,
}

const HEADER: [&str; 4] = ["sweep", "det_err_prob", "ghost_rate", "mean_runtime_s"];

/// Write rows as CSV with a fixed header and `\n` line endings.
pub fn emit_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_csv(rows, file)?;
    Ok(())
}

pub fn write_csv<W: std::io::Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::invariant("header", format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        emit_csv(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "sweep,det_err_prob,ghost_rate,mean_runtime_s\n");
        assert!(read_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn one_row_two_lines_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.csv");
        let rows = vec![ResultRow {
            sweep: "bw=100000000;k=2".into(),
            detection_error_probability: 0.123_456_789_012_345_67,
            ghost_rate: 1.0 / 3.0,
            mean_runtime: 0.0,
        }];
        emit_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains('\r'));
        assert_eq!(read_csv(&p).unwrap(), rows);
    }
}
