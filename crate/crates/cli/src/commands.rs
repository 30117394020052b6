//! Subcommand implementations. Each writes its artifacts under the
//! configured output directory and returns the record it persisted.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use log::{info, warn};
use prospr_core::data::{Sampler, SamplerConfig, SamplerMode};
use prospr_core::nn::{read_checkpoint, state_from_named, write_checkpoint};
use prospr_core::oracle::{compare, fd_meta_gradient, EntrySelection, FdConfig, GradCheckReport};
use prospr_core::pipeline::prune;
use prospr_core::pruning::{layer_collapse_report, meta_gradient, read_mask, write_mask, MaskSpec, SPARSITY_GRID_PERCENT};
use prospr_core::trainer::train_pruned;
use prospr_core::RetainPolicy;

use crate::config::{granularity_tag, parse_criterion, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::records::{
    append_rows, format_summary, read_json, read_rows, summarize, unix_seconds, write_json, write_record,
    write_summary, PruneArtifacts, PruneRecord, ResultRow, RunArtifacts, RunRecord, SaliencySummary, RESULTS_FILE,
};

pub const INIT_CHECKPOINT: &str = "init.ckpt";
pub const MASK_FILE: &str = "mask.bin";
pub const SALIENCY_FILE: &str = "saliency.json";
pub const PRUNE_RECORD: &str = "prune.json";
pub const TRAINED_CHECKPOINT: &str = "trained.ckpt";
pub const RUN_RECORD: &str = "run.json";
pub const SUMMARY_FILE: &str = "summary.csv";

fn refuse_overwrite(paths: &[PathBuf], force: bool) -> Result<()> {
    match paths.iter().find(|p| p.exists()) {
        Some(p) if !force => Err(CliError::Exists(p.clone())),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

/// Scores, masks and persists the initialization, the mask and the saliency
/// report.
pub fn cmd_prune(cfg: &ExperimentConfig, force: bool, allow_zero_steps: bool) -> Result<PruneRecord> {
    cfg.validate(allow_zero_steps)?;
    let out = &cfg.out;
    let artifacts = PruneArtifacts {
        init_checkpoint: out.join(INIT_CHECKPOINT),
        mask: out.join(MASK_FILE),
        saliency_report: out.join(SALIENCY_FILE),
    };
    let record_path = out.join(PRUNE_RECORD);
    refuse_overwrite(
        &[artifacts.init_checkpoint.clone(), artifacts.mask.clone(), artifacts.saliency_report.clone(), record_path.clone()],
        force,
    )?;
    let started_unix = unix_seconds();
    let (train, _) = cfg.load_data()?;
    let net = cfg.network(&train)?;
    let state = cfg.init_state(&net)?;
    let outcome = prune(&net, &state, &train, &cfg.prune_config())?;
    info!(
        "{}: kept {} of {} entries in {:.2} s",
        cfg.criterion.tag(),
        outcome.mask.retained(),
        outcome.mask.bits().len(),
        outcome.report.elapsed_seconds
    );
    create_dir(out)?;
    write_checkpoint(&artifacts.init_checkpoint, &state)?;
    write_mask(&artifacts.mask, &outcome.mask)?;
    write_json(&artifacts.saliency_report, &outcome.report)?;
    let record = PruneRecord {
        config: cfg.clone(),
        saliency: SaliencySummary::from(&outcome.report),
        density: outcome.mask.density(),
        layers: outcome.collapse,
        started_unix,
        finished_unix: unix_seconds(),
        artifacts,
    };
    let a = &record.artifacts;
    write_record(&record_path, &record, &[&a.init_checkpoint, &a.mask, &a.saliency_report])?;
    Ok(record)
}

/// Trains a pruned model from a mask file and an initial checkpoint,
/// defaulting to the ones `cmd_prune` wrote in the output directory.
pub fn cmd_train(cfg: &ExperimentConfig, mask: Option<&Path>, force: bool) -> Result<RunRecord> {
    cfg.validate(true)?;
    let out = &cfg.out;
    let mask_path = mask.map(Path::to_path_buf).unwrap_or_else(|| out.join(MASK_FILE));
    let init_path = cfg.init_weights.clone().unwrap_or_else(|| out.join(INIT_CHECKPOINT));
    let trained_path = out.join(TRAINED_CHECKPOINT);
    let record_path = out.join(RUN_RECORD);
    refuse_overwrite(&[trained_path.clone(), record_path.clone()], force)?;
    for p in [&mask_path, &init_path] {
        if !p.exists() {
            return Err(CliError::artifact(p, "not found"));
        }
    }
    let started_unix = unix_seconds();
    let (train, test) = cfg.load_data()?;
    let net = cfg.network(&train)?;
    let state = state_from_named(&net, read_checkpoint(&init_path)?)?;
    let mask = read_mask(&mask_path)?;
    mask.spec().check_model(&state)?;

    // Label the run with the settings that produced the mask when known.
    let prune_record_path = mask_path.with_file_name(PRUNE_RECORD);
    let prune_record: Option<PruneRecord> =
        if prune_record_path.exists() { Some(read_json(&prune_record_path)?) } else { None };
    let mut label = prune_record.as_ref().map(|r| r.config.clone()).unwrap_or_else(|| cfg.clone());
    label.seed = cfg.seed;
    label.out = cfg.out.clone();
    label.density = mask.density();
    label.granularity = mask.spec().granularity;

    let (trained, metrics) = train_pruned(&net, &state, &mask, &train, &test, &cfg.train_config())?;
    create_dir(out)?;
    write_checkpoint(&trained_path, &trained)?;
    let saliency_path = mask_path.with_file_name(SALIENCY_FILE);
    let record = RunRecord {
        run_id: label.run_id(),
        config: ExperimentConfig { train: cfg.train_config(), ..label.clone() },
        saliency: prune_record.as_ref().map(|r| r.saliency.clone()),
        density: mask.density(),
        layers: layer_collapse_report(&mask),
        metrics,
        started_unix,
        finished_unix: unix_seconds(),
        artifacts: RunArtifacts {
            init_checkpoint: init_path,
            mask: mask_path,
            saliency_report: saliency_path.exists().then_some(saliency_path),
            trained_checkpoint: trained_path,
        },
    };
    write_record(&record_path, &record, &record.referenced_paths())?;
    append_rows(&out.join(RESULTS_FILE), &[result_row(&record, &record_path)])?;
    info!("{}: final accuracy {:.4}", record.run_id, record.metrics.final_accuracy);
    Ok(record)
}

fn result_row(record: &RunRecord, record_path: &Path) -> ResultRow {
    let c = &record.config;
    ResultRow {
        run_id: record.run_id.clone(),
        criterion: c.criterion.tag().into(),
        meta_steps: c.meta_steps,
        density: record.density,
        seed: c.seed,
        final_acc: record.metrics.final_accuracy,
        train_seconds: record.metrics.wall_seconds,
        collapse_flag: record.layers.collapsed,
        sparsity: c.sparsity_percent(),
        granularity: granularity_tag(c.granularity).into(),
        meta_lr: c.meta_lr,
        meta_batch_size: c.meta_batch_size,
        model: c.model.tag().into(),
        dataset: c.dataset.tag().into(),
        epochs: c.train.epochs,
        prune_seconds: record.saliency.as_ref().map_or(0.0, |s| s.elapsed_seconds),
        record: record_path.to_path_buf(),
    }
}

/// Prune then train in one output directory.
pub fn cmd_run(cfg: &ExperimentConfig, force: bool, allow_zero_steps: bool) -> Result<RunRecord> {
    cmd_prune(cfg, force, allow_zero_steps)?;
    cmd_train(&ExperimentConfig { init_weights: None, ..cfg.clone() }, None, force)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    SparsityGrid,
    MetaSteps,
    Criterion,
    Seed,
}

/// Grid points of a sweep; `values` is a comma-separated override of the
/// axis defaults. `0-test` on the step axis enables the zero-step path.
pub fn sweep_points(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: Option<&str>,
    seeds: usize,
) -> Result<Vec<(ExperimentConfig, bool)>> {
    let tokens: Option<Vec<&str>> = values.map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect());
    let bad = |t: &str| CliError::Usage(format!("sweep value `{t}` is not valid for this axis"));
    let mut points = Vec::new();
    match axis {
        SweepAxis::SparsityGrid => {
            let grid: Vec<f64> = match tokens {
                Some(ts) => ts.iter().map(|t| t.parse().map_err(|_| bad(t))).collect::<Result<_>>()?,
                None => SPARSITY_GRID_PERCENT.to_vec(),
            };
            for s in grid {
                points.push((ExperimentConfig { density: crate::config::parse_sparsity(s)?, ..base.clone() }, false));
            }
        }
        SweepAxis::MetaSteps => {
            for t in tokens.unwrap_or_else(|| vec!["1", "2", "3"]) {
                let (steps, zero) = match t {
                    "0-test" => (0, true),
                    "0" => return Err(CliError::Usage("M = 0 is only available as `0-test`".into())),
                    t => (t.parse().map_err(|_| bad(t))?, false),
                };
                points.push((ExperimentConfig { meta_steps: steps, ..base.clone() }, zero));
            }
        }
        SweepAxis::Criterion => {
            for t in tokens.unwrap_or_else(|| vec!["prospr", "prospr-fo", "snip", "magnitude", "random"]) {
                points.push((ExperimentConfig { criterion: parse_criterion(t)?, ..base.clone() }, false));
            }
        }
        SweepAxis::Seed => {
            let list: Vec<u64> = match tokens {
                Some(ts) => ts.iter().map(|t| t.parse().map_err(|_| bad(t))).collect::<Result<_>>()?,
                None => (0..seeds as u64).collect(),
            };
            for seed in list {
                points.push((ExperimentConfig { seed, ..base.clone() }, false));
            }
        }
    }
    for (p, _) in &mut points {
        p.out = base.out.join(p.run_id());
    }
    let mut ids: Vec<&PathBuf> = points.iter().map(|(p, _)| &p.out).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Usage("sweep values produce duplicate grid points".into()));
    }
    Ok(points)
}

pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub results: PathBuf,
    pub summary: PathBuf,
}

/// Runs every grid point in its own subdirectory, `jobs` at a time. Rows
/// reach `results.csv` through this thread only.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    points: Vec<(ExperimentConfig, bool)>,
    jobs: usize,
    force: bool,
) -> Result<SweepOutcome> {
    for (p, zero) in &points {
        p.validate(*zero)?;
    }
    create_dir(&base.out)?;
    let results = base.out.join(RESULTS_FILE);
    let total = points.len();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunRecord>)>();
    let mut records = Vec::new();
    let mut failed = 0;
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..jobs.clamp(1, total.max(1)) {
            let tx = tx.clone();
            let (points, next) = (&points, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((p, zero)) = points.get(i) else { break };
                if tx.send((i, cmd_run(p, force, *zero))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, outcome) in rx {
            match outcome {
                Ok(record) => {
                    let row = result_row(&record, &points[i].0.out.join(RUN_RECORD));
                    append_rows(&results, &[row])?;
                    println!(
                        "[{}/{total}] {}: accuracy {:.4}",
                        records.len() + failed + 1,
                        record.run_id,
                        record.metrics.final_accuracy
                    );
                    records.push(record);
                }
                Err(e) => {
                    failed += 1;
                    warn!("{}: {e}", points[i].0.run_id());
                    println!("[{}/{total}] {}: FAILED: {e}", records.len() + failed, points[i].0.run_id());
                }
            }
        }
        Ok(())
    })?;
    let summary_rows = summarize(&read_rows(&results)?);
    let summary = base.out.join(SUMMARY_FILE);
    write_summary(&summary, &summary_rows)?;
    print!("{}", format_summary(&summary_rows));
    if failed > 0 {
        return Err(CliError::SweepFailed { failed, total });
    }
    Ok(SweepOutcome { records, results, summary })
}

/// Compares the reverse-mode meta-gradient against central differences on a
/// fixed batch sequence.
pub fn cmd_check_grad(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    cfg.validate(true)?;
    let c = &cfg.check_grad;
    let (train, _) = cfg.load_data()?;
    let net = cfg.network(&train)?;
    let state = cfg.init_state(&net)?;
    let spec = MaskSpec::for_model(&state, cfg.granularity);
    let mut sampler = Sampler::new(
        &train,
        SamplerConfig { batch_size: c.batch_size, mode: SamplerMode::FixedSingleBatch, seed: cfg.seed },
    )?;
    let batches = sampler.take(cfg.meta_steps + 1);
    let analytic: Vec<f64> = meta_gradient(&net, &state, &spec, &batches, cfg.meta_lr, RetainPolicy::Keep)?
        .into_tensors()
        .into_iter()
        .flat_map(|t| t.into_data())
        .collect();
    let fd_cfg = FdConfig {
        step: c.step,
        entries: c.entries.map_or(EntrySelection::All, EntrySelection::Sample),
        seed: cfg.seed,
        ..FdConfig::default()
    };
    let numeric = fd_meta_gradient(&net, &state, &spec, &batches, cfg.meta_lr, &fd_cfg)?;
    Ok(compare(&analytic, &numeric, c.tolerance))
}

pub fn format_check_report(cfg: &ExperimentConfig, report: &GradCheckReport) -> String {
    format!(
        "gradient check: {} on {} ({} entries, M={}, meta-lr {}, step {:e})\n\
         max relative error    {:.3e}\n\
         median relative error {:.3e}\n\
         tolerance             {:.1e}\n\
         {}\n",
        cfg.model.tag(),
        cfg.dataset.tag(),
        report.entries.len(),
        cfg.meta_steps,
        cfg.meta_lr,
        cfg.check_grad.step,
        report.max_relative_error,
        report.median_relative_error,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    )
}

/// Mean and standard deviation per configuration from a results file.
pub fn cmd_report(results: &Path) -> Result<String> {
    if !results.exists() {
        return Err(CliError::artifact(results, "not found"));
    }
    Ok(format_summary(&summarize(&read_rows(results)?)))
}
