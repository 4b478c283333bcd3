use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str = "run_id,seed,step,split,loss,accuracy,wall_time_s";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

/// Append-only CSV writer; every row is flushed as soon as it is written.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        inner.write_record(HEADER.split(','))?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != HEADER {
        return Err(Error::Data(format!(
            "{}: unexpected header {:?}",
            path.display(),
            header
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Concatenates per-seed files into one, keeping a single header.
pub fn merge_metrics(parts: &[PathBuf], out: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(out)?;
    for p in parts {
        for row in read_metrics(p)? {
            w.write(&row)?;
        }
    }
    Ok(())
}
