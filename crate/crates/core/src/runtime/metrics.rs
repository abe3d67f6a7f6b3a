//! Append-only CSV metrics, one file per rank.

use std::fs::{File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub wall_time_s: f64,
    pub batches: u64,
    pub samples_seen: u64,
    pub buffer_population: usize,
    pub seen_count: usize,
    pub unseen_count: usize,
    pub throughput_samples_per_s: Option<f64>,
    pub train_mse: Option<f64>,
    pub val_mse: Option<f64>,
    pub lr: f64,
}

pub fn metrics_path(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("metrics_rank{rank}.csv"))
}

pub struct MetricsWriter {
    out: csv::Writer<File>,
}

impl MetricsWriter {
    /// Opens `path` for appending; the header is written only to a new file.
    pub fn append(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let out = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(file);
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> io::Result<()> {
        self.out.serialize(row).map_err(io::Error::other)?;
        self.out.flush()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: u64,
        message: String,
    },
    #[error("{0}: no metrics rows")]
    Empty(PathBuf),
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => MetricsError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => MetricsError::Parse {
            path: path.to_path_buf(),
            row: 0,
            message: format!("{other:?}"),
        },
    })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<MetricsRow>().enumerate() {
        let row = rec.map_err(|e| MetricsError::Parse {
            path: path.to_path_buf(),
            // 1-based data row; the header is row 0
            row: e
                .position()
                .map_or(i as u64 + 1, |p| p.line().saturating_sub(1)),
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(MetricsError::Empty(path.to_path_buf()));
    }
    Ok(rows)
}
