use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::trainloop::MetricsRow;

pub const METRICS_HEADER: &str = "epoch,steps,return,win_rate,deaths,l_q,l_b,conflict_frac,epsilon";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Appends rows to a metrics CSV, flushing after each one.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates the file and writes `# key=value` comment lines plus the header.
    pub fn create(path: &Path, comments: &[(&str, String)]) -> Result<Self, MetricsError> {
        let io = |source| MetricsError::Io { path: path.to_path_buf(), source };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        for (k, v) in comments {
            writeln!(out, "# {k}={v}").map_err(io)?;
        }
        writeln!(out, "{METRICS_HEADER}").map_err(io)?;
        out.flush().map_err(io)?;
        Ok(Self { path: path.to_path_buf(), out })
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        let io = |source| MetricsError::Io { path: self.path.clone(), source };
        writeln!(self.out, "{}", format_row(row)).map_err(io)?;
        self.out.flush().map_err(io)
    }
}

pub fn format_row(r: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.epoch, r.steps, r.mean_return, r.win_rate, r.mean_deaths, r.l_q, r.l_b, r.conflict_frac, r.epsilon
    )
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path, comments: &[(&str, String)]) -> Result<(), MetricsError> {
    let mut w = MetricsWriter::create(path, comments)?;
    for r in rows {
        w.push(r)?;
    }
    Ok(())
}

/// Parses metrics CSV text; `#` lines are skipped.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rows = Vec::new();
    let mut header = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header {
            if line != METRICS_HEADER {
                return Err(MetricsError::Format { line: lineno, message: format!("unexpected header `{line}`") });
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(MetricsError::Format { line: lineno, message: format!("expected 9 fields, found {}", f.len()) });
        }
        let bad = |j: usize| MetricsError::Format { line: lineno, message: format!("bad field `{}`", f[j]) };
        let real = |j: usize| f[j].parse::<f64>().map_err(|_| bad(j));
        rows.push(MetricsRow {
            epoch: f[0].parse().map_err(|_| bad(0))?,
            steps: f[1].parse().map_err(|_| bad(1))?,
            mean_return: real(2)?,
            win_rate: real(3)?,
            mean_deaths: real(4)?,
            l_q: real(5)?,
            l_b: real(6)?,
            conflict_frac: real(7)?,
            epsilon: real(8)?,
        });
    }
    if !header {
        return Err(MetricsError::Format { line: 0, message: "missing header".into() });
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
    parse_metrics(&text)
}
