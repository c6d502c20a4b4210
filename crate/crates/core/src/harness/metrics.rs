//! Metrics persistence: an append-only CSV of typed rows plus an atomic
//! JSON summary per run.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "run_id,step,epoch,phase,value_name,value";

/// Buffered row writer. The header is written once when the file is
/// created; later runs append rows under their own run id.
pub struct MetricsWriter {
    out: BufWriter<File>,
    run_id: String,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn append(dir: &Path, run_id: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        let fresh = !path.exists() || fs::metadata(&path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{CSV_HEADER}")?;
        }
        Ok(MetricsWriter {
            out,
            run_id: run_id.to_string(),
            last_step: None,
        })
    }

    /// Appends one row. Steps must be monotone non-decreasing.
    pub fn write(&mut self, step: u64, epoch: u64, phase: &str, name: &str, value: f64) -> Result<()> {
        if let Some(last) = self.last_step {
            if step < last {
                return Err(Error::InvalidArgument(format!(
                    "metrics rows must be monotone in step: {step} after {last}"
                )));
            }
        }
        self.last_step = Some(step);
        writeln!(
            self.out,
            "{},{},{},{},{},{}",
            self.run_id, step, epoch, phase, name, fmt_value(value)
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn fmt_value(value: f64) -> String {
    // Full round-trip precision so reruns can be compared bitwise.
    format!("{value:?}")
}

/// End-of-run summary, serialized atomically (temp file then rename) so an
/// interrupted run never leaves a partial JSON behind.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: String,
    pub final_test_accuracy: Option<f64>,
    pub total_wall_clock_ns: u64,
    pub total_cost_units: f64,
    pub config_hash: String,
}

impl RunSummary {
    pub fn write_atomic(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("summary-{}.json", self.run_id));
        let tmp = dir.join(format!(".summary-{}.json.tmp", self.run_id));
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
        fs::write(&tmp, json)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
