// Copyright 2026 The sdplab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! The per-run metrics log.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

pub const METRICS_COLUMNS: [&str; 22] = [
    "run_id",
    "seed",
    "method",
    "loss_mode",
    "step",
    "remaining_fraction",
    "epoch",
    "split",
    "accuracy",
    "loss_total",
    "loss_ce",
    "loss_kld",
    "loss_cc",
    "snr",
    "mi_knn",
    "mi_binned_avg",
    "kde_mi_input",
    "kde_mi_label",
    "overlap_vs_mbp",
    "frob_distortion_total",
    "repr_distance",
    "recovery_epochs",
];

/// Row kinds written in the `split` column.
pub mod split {
    /// Dev accuracy after a retraining epoch; losses are training-epoch means.
    pub const EPOCH: &str = "epoch";
    pub const PRE_PRUNE: &str = "dev_pre_prune";
    pub const POST_PRUNE: &str = "dev_post_prune";
    /// Dev accuracy and analysis metrics at the end of a step (step 0: before any pruning).
    pub const BOUNDARY: &str = "boundary";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recovery {
    Epochs(usize),
    Unrecovered,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub loss_mode: String,
    pub step: usize,
    pub remaining_fraction: f64,
    pub epoch: usize,
    pub split: &'static str,
    pub accuracy: Option<f64>,
    pub loss_total: Option<f64>,
    pub loss_ce: Option<f64>,
    pub loss_kld: Option<f64>,
    pub loss_cc: Option<f64>,
    pub snr: Option<f64>,
    pub mi_knn: Option<f64>,
    pub mi_binned_avg: Option<f64>,
    pub kde_mi_input: Option<f64>,
    pub kde_mi_label: Option<f64>,
    pub overlap_vs_mbp: Option<f64>,
    pub frob_distortion_total: Option<f64>,
    pub repr_distance: Option<f64>,
    pub recovery_epochs: Option<Recovery>,
}

/// Nine significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

impl MetricsRow {
    pub fn validate(&self) -> CliResult<()> {
        if !(self.remaining_fraction > 0.0 && self.remaining_fraction <= 1.0) {
            return Err(CliError::Schema(format!("remaining_fraction {} outside (0, 1]", self.remaining_fraction)));
        }
        if let Some(a) = self.accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(CliError::Schema(format!("accuracy {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn fields(&self) -> [String; 22] {
        [
            self.run_id.clone(),
            self.seed.to_string(),
            self.method.clone(),
            self.loss_mode.clone(),
            self.step.to_string(),
            fmt_float(self.remaining_fraction),
            self.epoch.to_string(),
            self.split.to_string(),
            opt(self.accuracy),
            opt(self.loss_total),
            opt(self.loss_ce),
            opt(self.loss_kld),
            opt(self.loss_cc),
            opt(self.snr),
            opt(self.mi_knn),
            opt(self.mi_binned_avg),
            opt(self.kde_mi_input),
            opt(self.kde_mi_label),
            opt(self.overlap_vs_mbp),
            opt(self.frob_distortion_total),
            opt(self.repr_distance),
            match self.recovery_epochs {
                None => String::new(),
                Some(Recovery::Epochs(n)) => n.to_string(),
                Some(Recovery::Unrecovered) => "unrecovered".to_string(),
            },
        ]
    }
}

/// Append-only CSV; the header goes out on creation and every `flush`
/// leaves a file that parses.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        inner.write_record(METRICS_COLUMNS).map_err(|e| csv_err(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            inner,
        };
        w.flush()?;
        Ok(w)
    }

    pub fn write(&mut self, row: &MetricsRow) -> CliResult<()> {
        row.validate()?;
        self.inner.write_record(row.fields()).map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> CliResult<()> {
        self.inner.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

/// A metrics CSV read back as header-indexed string cells.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    /// Errors list every missing column.
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let header: Vec<String> = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
        let missing: Vec<&str> = METRICS_COLUMNS.iter().copied().filter(|c| !header.iter().any(|h| h == c)).collect();
        if !missing.is_empty() {
            return Err(CliError::Schema(format!("{}: missing columns: {}", path.display(), missing.join(", "))));
        }
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(|e| csv_err(path, e))?;
        if rows.is_empty() {
            return Err(CliError::Schema(format!("{}: no data rows", path.display())));
        }
        Ok(MetricsTable { header, rows })
    }

    pub fn column(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).expect("columns checked on read")
    }

    pub fn cell<'a>(&self, row: &'a [String], name: &str) -> &'a str {
        &row[self.column(name)]
    }

    pub fn rows_with_split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a Vec<String>> + 'a {
        let c = self.column("split");
        self.rows.iter().filter(move |r| r[c] == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> MetricsRow {
        MetricsRow {
            run_id: "r".into(),
            method: "mbp".into(),
            loss_mode: "ce".into(),
            remaining_fraction: 0.9,
            split: split::BOUNDARY,
            accuracy: Some(0.5),
            recovery_epochs: Some(Recovery::Unrecovered),
            ..Default::default()
        }
    }

    #[test]
    fn floats_have_nine_significant_digits() {
        assert_eq!(fmt_float(0.123456789123), "1.23456789e-1");
        assert_eq!(fmt_float(1.0), "1.00000000e0");
    }

    #[test]
    fn row_invariants() {
        assert!(row().validate().is_ok());
        let mut r = row();
        r.remaining_fraction = 0.0;
        assert!(r.validate().is_err());
        let mut r = row();
        r.accuracy = Some(1.5);
        assert!(r.validate().is_err());
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&p).unwrap();
        w.write(&row()).unwrap();
        w.flush().unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&METRICS_COLUMNS.join(",")));
        assert!(!text.contains('\r'));
        let t = MetricsTable::read(&p).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.cell(&t.rows[0], "recovery_epochs"), "unrecovered");
        assert_eq!(t.cell(&t.rows[0], "snr"), "");
    }

    #[test]
    fn missing_columns_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "run_id,seed\nx,1\n").unwrap();
        let e = MetricsTable::read(&p).unwrap_err().to_string();
        assert!(e.contains("method") && e.contains("recovery_epochs"), "{e}");
        std::fs::write(&p, format!("{}\n", METRICS_COLUMNS.join(","))).unwrap();
        assert!(MetricsTable::read(&p).unwrap_err().to_string().contains("no data rows"));
    }
}
