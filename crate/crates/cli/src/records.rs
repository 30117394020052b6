//! Persisted run records and the append-only `results.csv`.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use prospr_core::pruning::{CollapseReport, SaliencyReport};
use prospr_core::trainer::RunMetrics;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Saliency provenance without the per-entry vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySummary {
    pub criterion: String,
    pub steps: usize,
    pub normalizer: f64,
    pub batches_consumed: usize,
    pub elapsed_seconds: f64,
    pub magnitude_fallback: bool,
}

impl From<&SaliencyReport> for SaliencySummary {
    fn from(r: &SaliencyReport) -> Self {
        SaliencySummary {
            criterion: r.criterion.tag().to_string(),
            steps: r.steps,
            normalizer: r.normalizer,
            batches_consumed: r.batches_consumed,
            elapsed_seconds: r.elapsed_seconds,
            magnitude_fallback: r.magnitude_fallback,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneArtifacts {
    pub init_checkpoint: PathBuf,
    pub mask: PathBuf,
    pub saliency_report: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub config: ExperimentConfig,
    pub saliency: SaliencySummary,
    pub density: f64,
    pub layers: CollapseReport,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: PruneArtifacts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub init_checkpoint: PathBuf,
    pub mask: PathBuf,
    pub saliency_report: Option<PathBuf>,
    pub trained_checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub saliency: Option<SaliencySummary>,
    pub density: f64,
    pub layers: CollapseReport,
    pub metrics: RunMetrics,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: RunArtifacts,
}

impl RunRecord {
    pub fn referenced_paths(&self) -> Vec<&Path> {
        let a = &self.artifacts;
        let mut paths = vec![a.init_checkpoint.as_path(), a.mask.as_path(), a.trained_checkpoint.as_path()];
        paths.extend(a.saliency_report.as_deref());
        paths
    }
}

/// Writes `value` as pretty JSON after checking that every path in
/// `referenced` exists.
pub fn write_record<T: Serialize>(path: &Path, value: &T, referenced: &[&Path]) -> Result<()> {
    if let Some(missing) = referenced.iter().find(|p| !p.exists()) {
        return Err(CliError::artifact(path, format!("referenced artifact {} does not exist", missing.display())));
    }
    write_json(path, value)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::artifact(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::artifact(path, e))
}

/// One line of `results.csv`. The first eight columns are fixed; later
/// columns may only be appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub criterion: String,
    #[serde(rename = "M")]
    pub meta_steps: usize,
    pub density: f64,
    pub seed: u64,
    pub final_acc: f64,
    pub train_seconds: f64,
    pub collapse_flag: bool,
    pub sparsity: f64,
    pub granularity: String,
    pub meta_lr: f64,
    pub meta_batch_size: usize,
    pub model: String,
    pub dataset: String,
    pub epochs: usize,
    pub prune_seconds: f64,
    pub record: PathBuf,
}

pub const RESULTS_FILE: &str = "results.csv";

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let io = |e| CliError::io(format!("appending to {}", path.display()), e);
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| CliError::artifact(path, e))?;
    }
    w.flush().map_err(io)
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::artifact(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| CliError::artifact(path, e))).collect()
}

/// Accuracy statistics over the seeds of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub criterion: String,
    #[serde(rename = "M")]
    pub meta_steps: usize,
    pub sparsity: f64,
    pub granularity: String,
    pub model: String,
    pub dataset: String,
    pub runs: usize,
    pub mean_acc: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_acc: f64,
    pub collapsed_runs: usize,
}

/// dataset, model, granularity, criterion, M, sparsity in tenths of a percent
type GroupKey = (String, String, String, String, usize, u64);

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.dataset.clone(),
            r.model.clone(),
            r.granularity.clone(),
            r.criterion.clone(),
            r.meta_steps,
            (r.sparsity * 10.0).round() as u64,
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = g.iter().map(|r| r.final_acc).sum::<f64>() / n;
            let var = if g.len() > 1 {
                g.iter().map(|r| (r.final_acc - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let first = g[0];
            SummaryRow {
                criterion: first.criterion.clone(),
                meta_steps: first.meta_steps,
                sparsity: first.sparsity,
                granularity: first.granularity.clone(),
                model: first.model.clone(),
                dataset: first.dataset.clone(),
                runs: g.len(),
                mean_acc: mean,
                std_acc: var.sqrt(),
                collapsed_runs: g.iter().filter(|r| r.collapse_flag).count(),
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::artifact(path, e))?;
    for row in summary {
        w.serialize(row).map_err(|e| CliError::artifact(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<10} {:>2} {:>6} {:<12} {:>4} {:>16} {:>9}\n",
        "criterion", "M", "sp%", "granularity", "n", "accuracy %", "collapsed"
    );
    for s in summary {
        out.push_str(&format!(
            "{:<10} {:>2} {:>6.1} {:<12} {:>4} {:>8.2} ± {:<5.2} {:>9}\n",
            s.criterion,
            s.meta_steps,
            s.sparsity,
            s.granularity,
            s.runs,
            100.0 * s.mean_acc,
            100.0 * s.std_acc,
            s.collapsed_runs
        ));
    }
    out
}
