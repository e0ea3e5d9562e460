use std::io::{self, BufRead, Write};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,step,train_loss,test_error_percent,wall_ms";

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    /// Mean mini-batch loss since the previous evaluation.
    pub train_loss: f64,
    pub test_error_percent: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    /// CSV line without terminator. Floats use Rust's shortest round-trip
    /// formatting.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.step, self.train_loss, self.test_error_percent, self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed metrics row `{line}`"));
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            train_loss: f[2].parse().map_err(|_| bad())?,
            test_error_percent: f[3].parse().map_err(|_| bad())?,
            wall_ms: f[4].parse().map_err(|_| bad())?,
        })
    }
}

/// Streams metrics rows as UTF-8 CSV with LF line endings.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> io::Result<()> {
        writeln!(self.out, "{}", row.csv_line())?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_metrics<R: BufRead>(input: R) -> Result<Vec<MetricsRow>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h == METRICS_HEADER => {}
        _ => return Err(Error::Config(format!("metrics CSV must start with `{METRICS_HEADER}`"))),
    }
    lines
        .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
        .map(|l| MetricsRow::parse(&l?))
        .collect()
}

/// Mean and variance of the test error over the last `window` evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrailingSummary {
    /// Number of rows actually used (fewer than requested for short runs).
    pub window: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

pub fn trailing_summary(rows: &[MetricsRow], window: usize) -> Option<TrailingSummary> {
    let take = window.min(rows.len());
    if take == 0 {
        return None;
    }
    let tail = &rows[rows.len() - take..];
    let n = take as f64;
    let mean = tail.iter().map(|r| r.test_error_percent).sum::<f64>() / n;
    let variance = tail.iter().map(|r| (r.test_error_percent - mean).powi(2)).sum::<f64>() / n;
    Some(TrailingSummary {
        window: take,
        mean,
        variance,
    })
}
