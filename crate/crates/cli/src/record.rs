//! The run record: a self-contained, versioned JSON document holding the
//! configuration echo, per-observation outputs, summary statistics, and
//! metrics when ground truth was supplied.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vscout_core::metrics::MetricsReport;
use vscout_core::pipeline::{CalibrationInfo, PipelineConfig, VscoutOutput};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub summary: RecordSummary,
    pub observations: Vec<ObservationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    pub diagnostics: RecordDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordSummary {
    pub n: usize,
    pub p: usize,
    pub d_eff_initial: usize,
    pub d_eff_final: usize,
    pub relevant_initial: Vec<usize>,
    pub relevant_final: Vec<usize>,
    pub tau_star: Option<usize>,
    pub n_in: usize,
    pub t2_threshold: f64,
    pub recon_cutoff: f64,
    pub refine_restored: bool,
}

/// One observation: the four indicators, the consensus label, and the
/// statistics behind them. Binary fields are 0/1 for easy column use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub index: usize,
    pub y_hat: u8,
    pub c: u8,
    pub e: u8,
    pub u: u8,
    pub q: u8,
    pub anomaly_score: f64,
    pub t2: f64,
    pub recon_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordDiagnostics {
    pub train_loss: Vec<f64>,
    pub refine_loss: Vec<f64>,
    pub provisional_outliers: usize,
    pub per_detector_provisional: Vec<(String, usize)>,
    pub per_detector_final: Vec<(String, usize)>,
    pub jacobian_column_norms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationInfo>,
}

pub fn build_record(
    out: &VscoutOutput,
    config: &PipelineConfig,
    seed: u64,
    n: usize,
    p: usize,
    metrics: Option<MetricsReport>,
) -> RunRecord {
    let flags = &out.flags;
    let observations = (0..n)
        .map(|i| ObservationRecord {
            index: i,
            y_hat: flags.labels[i] as u8,
            c: flags.changepoint[i] as u8,
            e: flags.ensemble[i] as u8,
            u: flags.t2[i] as u8,
            q: flags.reconstruction[i] as u8,
            anomaly_score: flags.anomaly_score[i],
            t2: out.diagnostics.t2_values[i],
            recon_error: out.diagnostics.recon_errors[i],
        })
        .collect();
    RunRecord {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: config.clone(),
        summary: RecordSummary {
            n,
            p,
            d_eff_initial: out.diagnostics.d_eff_initial,
            d_eff_final: out.diagnostics.d_eff_final,
            relevant_initial: out.diagnostics.relevant_initial.clone(),
            relevant_final: out.diagnostics.relevant_final.clone(),
            tau_star: out.diagnostics.tau_star,
            n_in: out.diagnostics.n_in,
            t2_threshold: out.baseline.t2_threshold,
            recon_cutoff: out.baseline.recon_cutoff.unwrap_or(f64::NAN),
            refine_restored: out.diagnostics.refine_restored,
        },
        observations,
        metrics,
        diagnostics: RecordDiagnostics {
            train_loss: out.diagnostics.train_loss.clone(),
            refine_loss: out.diagnostics.refine_loss.clone(),
            provisional_outliers: n - out.diagnostics.n_in,
            per_detector_provisional: out.diagnostics.per_detector_provisional.clone(),
            per_detector_final: out.diagnostics.per_detector_final.clone(),
            jacobian_column_norms: out.diagnostics.jacobian_column_norms.clone(),
            calibration: out.diagnostics.calibration.clone(),
        },
    }
}

pub fn write_record(record: &RunRecord, path: &Path) -> CliResult<()> {
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| CliError::Pipeline(format!("record serialization: {e}")))?;
    std::fs::write(path, json.as_bytes())
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_record(path: &Path) -> CliResult<RunRecord> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let record: RunRecord = serde_json::from_str(&text)
        .map_err(|e| CliError::input(format!("{}: malformed record: {e}", path.display())))?;
    if record.schema_version != SCHEMA_VERSION {
        return Err(CliError::input(format!(
            "{}: unsupported schema version {}",
            path.display(),
            record.schema_version
        )));
    }
    Ok(record)
}
