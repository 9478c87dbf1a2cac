//! Result emission: a CSV table of aggregates plus a JSON companion carrying
//! the full configuration for reproduction.
//!
//! Output is byte-deterministic: no timestamps, '.' decimal separator, LF
//! line endings, and floats printed in Rust's shortest round-trip form.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{AggregateRow, ExperimentOutput, TrialFailure};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "sweep_var,value,deployment,trials,Pe_mean,Pe_stderr,NMSE_mean_dB,NMSE_stderr_dB,iters_mean,fronthaul_scalars";

/// JSON companion schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub rows: Vec<AggregateRow>,
    pub failed_trials: Vec<FailureRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub message: String,
}

impl From<&TrialFailure> for FailureRecord {
    fn from(f: &TrialFailure) -> Self {
        FailureRecord {
            sweep_value: f.sweep_value,
            trial: f.trial,
            seed: f.seed,
            message: f.message.clone(),
        }
    }
}

pub fn write_csv(output: &ExperimentOutput, writer: &mut impl Write) -> Result<()> {
    writeln!(writer, "{CSV_HEADER}")?;
    for row in &output.rows {
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{},{},{}",
            row.sweep_var,
            row.value,
            row.deployment,
            row.trials,
            row.pe_mean,
            row.pe_stderr,
            row.nmse_mean_db,
            row.nmse_stderr_db,
            row.iters_mean,
            row.fronthaul_scalars
        )?;
    }
    Ok(())
}

pub fn csv_string(output: &ExperimentOutput) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(output, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn json_string(output: &ExperimentOutput) -> Result<String> {
    let doc = ResultsDocument {
        schema_version: 1,
        config: output.config.clone(),
        rows: output.rows.clone(),
        failed_trials: output.failures.iter().map(FailureRecord::from).collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialization(e.to_string()))
}

/// Write `results.csv` and `results.json` into `dir`, creating it if needed.
pub fn emit_results(output: &ExperimentOutput, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("results.csv");
    let json_path = dir.join("results.json");
    std::fs::write(&csv_path, csv_string(output)?)?;
    std::fs::write(&json_path, json_string(output)?)?;
    Ok((csv_path, json_path))
}

/// Parse a previously written JSON companion.
pub fn load_results(path: &Path) -> Result<ResultsDocument> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
}
