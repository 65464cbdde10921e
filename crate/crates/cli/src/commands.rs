//! Subcommand implementations.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vscout_core::metrics::{auroc, score_labels, MetricsReport};
use vscout_core::pipeline::{run_vscout, PipelineConfig};
use vscout_core::simgen::{self, ScenarioSpec};
use vscout_core::RngStream;

use crate::chart;
use crate::csvio;
use crate::error::{CliError, CliResult};
use crate::record::{self, RunRecord};
use crate::{BenchmarkArgs, ChartArgs, DetectArgs, SimulateArgs};

fn load_pipeline_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            let cfg: PipelineConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::input(format!("{}: invalid config: {e}", p.display())))?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run_metrics(
    truth: &[bool],
    labels: &[bool],
    scores: &[f64],
) -> CliResult<MetricsReport> {
    let mut report = score_labels(truth, labels).map_err(CliError::from)?;
    // AUROC needs both classes; leave it missing otherwise.
    report.auroc = auroc(truth, scores).ok();
    Ok(report)
}

pub fn cmd_detect(args: &DetectArgs) -> CliResult<()> {
    let x = csvio::read_matrix_csv(&args.input)?;
    let truth = match &args.truth {
        Some(path) => {
            let labels = csvio::read_labels_csv(path)?;
            if labels.len() != x.rows() {
                return Err(CliError::input(format!(
                    "truth has {} labels for {} observations",
                    labels.len(),
                    x.rows()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    let config = load_pipeline_config(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(config.train.seed);
    let out = run_vscout(&x, &config, &RngStream::new(seed))?;

    let metrics = truth
        .as_deref()
        .map(|t| run_metrics(t, &out.flags.labels, &out.flags.anomaly_score))
        .transpose()?;
    let record = record::build_record(&out, &config, seed, x.rows(), x.cols(), metrics);

    match &args.output {
        Some(path) => record::write_record(&record, path)?,
        None => {
            let json = serde_json::to_string_pretty(&record)
                .map_err(|e| CliError::Pipeline(format!("record serialization: {e}")))?;
            println!("{json}");
        }
    }
    if let Some(path) = &args.chart {
        std::fs::write(path, chart::render(&record))
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    }
    let flagged = record.observations.iter().filter(|o| o.y_hat == 1).count();
    eprintln!(
        "detect: n={} p={} d_eff={} flagged={} seed={}",
        record.summary.n, record.summary.p, record.summary.d_eff_final, flagged, seed
    );
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let spec = ScenarioSpec {
        dist: args.dist,
        n: args.n,
        p: args.p,
        delta: args.delta,
        gamma: args.gamma,
        shift_type: args.shift,
        seed: args.seed,
    };
    let sample = simgen::generate(&spec, &mut RngStream::new(spec.seed))?;
    if let Some(warning) = &sample.warning {
        eprintln!("warning: {warning}");
    }
    let mut data = Vec::new();
    simgen::write_csv(&sample.x, &mut data)?;
    std::fs::write(&args.output, data)
        .map_err(|e| CliError::input(format!("{}: {e}", args.output.display())))?;
    if let Some(labels_path) = &args.labels {
        let mut labels = Vec::new();
        simgen::write_labels_csv(&sample.truth, &mut labels)?;
        std::fs::write(labels_path, labels)
            .map_err(|e| CliError::input(format!("{}: {e}", labels_path.display())))?;
    }
    eprintln!(
        "simulate: wrote {} rows x {} columns ({} contaminated)",
        spec.n,
        spec.p,
        sample.truth.iter().filter(|&&t| t).count()
    );
    Ok(())
}

/// One scenario in the benchmark file: a generative spec plus an id and
/// replication count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(flatten)]
    pub spec: ScenarioSpec,
}

fn default_replications() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkFile {
    #[serde(default)]
    pub pipeline: Option<PipelineConfig>,
    pub scenarios: Vec<ScenarioEntry>,
}

struct ReplicationRow {
    scenario_id: String,
    replication: usize,
    metrics: Option<MetricsReport>,
    runtime_seconds: f64,
    error: Option<String>,
}

fn run_replication(
    spec: &ScenarioSpec,
    config: &PipelineConfig,
    replication: usize,
) -> (Option<MetricsReport>, f64, Option<String>) {
    // Replication seeding: base seed plus index, so any subset of
    // replications reproduces independently.
    let seed = spec.seed.wrapping_add(replication as u64);
    let mut spec = spec.clone();
    spec.seed = seed;
    let start = Instant::now();
    let result = simgen::generate(&spec, &mut RngStream::new(seed)).and_then(|sample| {
        let out = run_vscout(&sample.x, config, &RngStream::new(seed))?;
        let mut report = score_labels(&sample.truth, &out.flags.labels)?;
        report.auroc = auroc(&sample.truth, &out.flags.anomaly_score).ok();
        Ok(report)
    });
    let runtime = start.elapsed().as_secs_f64();
    match result {
        Ok(report) => (Some(report), runtime, None),
        Err(e) => (None, runtime, Some(e.to_string())),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Mean and standard deviation over present values, formatted
/// `mean±std`; empty when no values are present.
fn fmt_aggregate(values: &[f64]) -> String {
    if values.is_empty() {
        return String::new();
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (values.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    format!("{mean:.6}±{std:.6}")
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.scenarios)
        .map_err(|e| CliError::input(format!("{}: {e}", args.scenarios.display())))?;
    let file: BenchmarkFile = serde_json::from_str(&text)
        .map_err(|e| CliError::input(format!("{}: invalid scenarios: {e}", args.scenarios.display())))?;
    if file.scenarios.is_empty() {
        return Err(CliError::input("no scenarios given"));
    }
    let config = file.pipeline.clone().unwrap_or_default();
    config.validate()?;
    for entry in &file.scenarios {
        entry.spec.validate()?;
        if entry.replications == 0 {
            return Err(CliError::input("replications must be at least 1"));
        }
    }

    let jobs: Vec<(String, ScenarioSpec, usize)> = file
        .scenarios
        .iter()
        .enumerate()
        .flat_map(|(idx, entry)| {
            let id = entry.id.clone().unwrap_or_else(|| format!("scenario{idx}"));
            (0..entry.replications)
                .map(move |r| (id.clone(), entry.spec.clone(), r))
                .collect::<Vec<_>>()
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Pipeline(format!("worker pool: {e}")))?;
    let rows: Vec<ReplicationRow> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|(id, spec, replication)| {
                let (metrics, runtime_seconds, error) =
                    run_replication(spec, &config, *replication);
                ReplicationRow {
                    scenario_id: id.clone(),
                    replication: *replication,
                    metrics,
                    runtime_seconds,
                    error,
                }
            })
            .collect()
    });

    let mut out = String::new();
    out.push_str(
        "scenario_id,replication,recall,precision,fpr,f1,auroc,inlier_retention,runtime_seconds,error\n",
    );
    for row in &rows {
        let m = row.metrics.as_ref();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3},{}\n",
            row.scenario_id,
            row.replication,
            fmt_opt(m.and_then(|m| m.recall)),
            m.map(|m| format!("{:.6}", m.precision)).unwrap_or_default(),
            fmt_opt(m.and_then(|m| m.fpr)),
            fmt_opt(m.and_then(|m| m.f1)),
            fmt_opt(m.and_then(|m| m.auroc)),
            fmt_opt(m.and_then(|m| m.inlier_retention)),
            row.runtime_seconds,
            row.error.clone().unwrap_or_default(),
        ));
    }

    // Aggregate section: one row per scenario, cells mean±std over the
    // successful replications.
    for entry in file.scenarios.iter().enumerate().map(|(idx, entry)| {
        entry
            .id
            .clone()
            .unwrap_or_else(|| format!("scenario{idx}"))
    }) {
        let scenario_rows: Vec<&ReplicationRow> =
            rows.iter().filter(|r| r.scenario_id == entry).collect();
        let collect = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<f64> {
            scenario_rows
                .iter()
                .filter_map(|r| r.metrics.as_ref().and_then(f))
                .collect()
        };
        let failures = scenario_rows.iter().filter(|r| r.error.is_some()).count();
        let runtimes: Vec<f64> = scenario_rows.iter().map(|r| r.runtime_seconds).collect();
        out.push_str(&format!(
            "{},aggregate,{},{},{},{},{},{},{},{}\n",
            entry,
            fmt_aggregate(&collect(&|m| m.recall)),
            fmt_aggregate(&collect(&|m| Some(m.precision))),
            fmt_aggregate(&collect(&|m| m.fpr)),
            fmt_aggregate(&collect(&|m| m.f1)),
            fmt_aggregate(&collect(&|m| m.auroc)),
            fmt_aggregate(&collect(&|m| m.inlier_retention)),
            fmt_aggregate(&runtimes),
            if failures > 0 {
                format!("failed={failures}")
            } else {
                String::new()
            },
        ));
    }

    std::fs::write(&args.output, out)
        .map_err(|e| CliError::input(format!("{}: {e}", args.output.display())))?;

    let succeeded = rows.iter().filter(|r| r.error.is_none()).count();
    eprintln!(
        "benchmark: {} replications, {} succeeded, {} scenarios",
        rows.len(),
        succeeded,
        file.scenarios.len()
    );
    if succeeded == 0 {
        return Err(CliError::Pipeline("every replication failed".into()));
    }
    Ok(())
}

pub fn cmd_chart(args: &ChartArgs) -> CliResult<()> {
    let record: RunRecord = record::read_record(&args.record)?;
    let svg = chart::render(&record);
    match &args.output {
        Some(path) => std::fs::write(path, svg)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(svg.as_bytes())?;
            stdout.write_all(b"\n")?;
        }
    }
    Ok(())
}

