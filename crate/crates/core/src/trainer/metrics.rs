use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::state::{finite_or_null, EpochRecord};
use crate::error::{Error, Result};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    #[serde(with = "finite_or_null")]
    pub train_ppl: f64,
    #[serde(with = "finite_or_null")]
    pub valid_ppl: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn new(record: &EpochRecord, seconds: f64) -> Self {
        MetricsRecord {
            epoch: record.epoch,
            train_ppl: record.train_ppl,
            valid_ppl: record.valid_ppl,
            lr: record.lr,
            seconds,
        }
    }
}

/// Line-delimited JSON writer, truncating any previous log.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("metrics record serializes");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
