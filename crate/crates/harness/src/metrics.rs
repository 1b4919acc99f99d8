//! Per-step training metrics and their CSV form.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ldeq_core::numfmt::format_g;

use crate::error::{HarnessError, Result};

pub const METRICS_HEADER: &str =
    "epoch,step,loss,accuracy,fwd_nfes,bwd_nfes,fwd_residual,bwd_residual,budget_L,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Global step, counted from 1 across epochs.
    pub step: usize,
    pub loss: f64,
    /// Batch accuracy.
    pub accuracy: f64,
    pub fwd_nfes: usize,
    /// 0 for Jacobian-free steps.
    pub bwd_nfes: usize,
    pub fwd_residual: f64,
    pub bwd_residual: f64,
    /// Certified Lipschitz bound after the step's projection.
    pub budget_l: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            format_g(self.loss, 6),
            format_g(self.accuracy, 6),
            self.fwd_nfes,
            self.bwd_nfes,
            format_g(self.fwd_residual, 6),
            format_g(self.bwd_residual, 6),
            format_g(self.budget_l, 6),
            format_g(self.wall_ms, 6)
        )
    }

    /// Inverse of [`MetricsRow::csv_line`], up to the `%.6g` rounding.
    pub fn parse_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return None;
        }
        Some(Self {
            epoch: f[0].parse().ok()?,
            step: f[1].parse().ok()?,
            loss: f[2].parse().ok()?,
            accuracy: f[3].parse().ok()?,
            fwd_nfes: f[4].parse().ok()?,
            bwd_nfes: f[5].parse().ok()?,
            fwd_residual: f[6].parse().ok()?,
            bwd_residual: f[7].parse().ok()?,
            budget_l: f[8].parse().ok()?,
            wall_ms: f[9].parse().ok()?,
        })
    }
}

/// Appends rows to `metrics.csv`, flushing after each one.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    /// Create (truncate) the file and write the header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.line(&row.csv_line())
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| HarnessError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "missing metrics header".into(),
        });
    }
    let mut offset = METRICS_HEADER.len() as u64 + 1;
    let mut rows = Vec::new();
    for l in lines {
        rows.push(MetricsRow::parse_line(l).ok_or_else(|| HarnessError::Format {
            path: path.to_path_buf(),
            offset,
            msg: format!("bad metrics row '{l}'"),
        })?);
        offset += l.len() as u64 + 1;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_line_uses_g_format() {
        let r = MetricsRow {
            epoch: 1,
            step: 7,
            loss: 1.0986122886681098,
            accuracy: 0.25,
            fwd_nfes: 9,
            bwd_nfes: 0,
            fwd_residual: 0.000812345678,
            bwd_residual: 0.0,
            budget_l: 0.8,
            wall_ms: 12345678.0,
        };
        assert_eq!(r.csv_line(), "1,7,1.09861,0.25,9,0,0.000812346,0,0.8,1.23457e+07");
        let back = MetricsRow::parse_line(&r.csv_line()).unwrap();
        assert_eq!(back.fwd_nfes, 9);
        assert_eq!(back.loss, 1.09861);
    }
}
