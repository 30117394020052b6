//! Command-line experiment runner: prune, train, sweep and gradient checks,
//! with artifacts and an append-only `results.csv` per output directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod records;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{
    cmd_check_grad, cmd_prune, cmd_report, cmd_run, cmd_sweep, cmd_train, format_check_report, sweep_points, SweepAxis,
};
use crate::config::{ExperimentConfig, Overrides};
pub use crate::error::{CliError, Result};
use crate::records::RESULTS_FILE;

#[derive(Debug, Parser)]
#[command(name = "prospr", version, about = "Pruning at initialization by meta-gradients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Flags accepted by every subcommand; each overrides the config file.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Sectioned key=value experiment file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset root directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Output directory for artifacts and results.csv.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// prospr, prospr-fo, snip, magnitude or random.
    #[arg(long, global = true)]
    pub criterion: Option<String>,
    /// Percentage of mask entries removed.
    #[arg(long, global = true)]
    pub sparsity: Option<f64>,
    /// Unrolled SGD steps before the scored loss.
    #[arg(long, global = true)]
    pub meta_steps: Option<usize>,
    /// Inner-loop learning rate.
    #[arg(long, global = true)]
    pub meta_lr: Option<f64>,
    #[arg(long, global = true)]
    pub meta_batch_size: Option<usize>,
    /// unstructured (per weight) or structured (per channel).
    #[arg(long, global = true)]
    pub granularity: Option<String>,
    /// Checkpoint to start from instead of a seeded initialization.
    #[arg(long, global = true)]
    pub init_weights: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            data_dir: self.data_dir.clone(),
            out: self.out.clone(),
            seed: self.seed,
            criterion: self.criterion.clone(),
            sparsity: self.sparsity,
            meta_steps: self.meta_steps,
            meta_lr: self.meta_lr,
            meta_batch_size: self.meta_batch_size,
            granularity: self.granularity.clone(),
            init_weights: self.init_weights.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    #[value(name = "sparsity-grid")]
    SparsityGrid,
    #[value(name = "M", alias = "m")]
    MetaSteps,
    Criterion,
    Seed,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::SparsityGrid => SweepAxis::SparsityGrid,
            AxisArg::MetaSteps => SweepAxis::MetaSteps,
            AxisArg::Criterion => SweepAxis::Criterion,
            AxisArg::Seed => SweepAxis::Seed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score the initialization and write the mask, report and init checkpoint.
    Prune,
    /// Train from a mask and an initial checkpoint.
    Train {
        /// Mask file; defaults to the one in --out.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Prune then train.
    Run,
    /// Run one grid axis, one subdirectory per point.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values (M accepts `0-test`).
        #[arg(long)]
        values: Option<String>,
        /// Seed count for the seed axis.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Grid points run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare the meta-gradient against finite differences.
    CheckGrad {
        #[cfg(feature = "fault-injection")]
        #[arg(long, hide = true)]
        inject_adjoint_fault: bool,
    },
    /// Summarize a results.csv.
    Report {
        /// Defaults to results.csv in --out.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

/// Executes a parsed command line, printing a short summary to stdout.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = ExperimentConfig::resolve(cli.common.config.as_deref(), &cli.common.overrides())?;
    let force = cli.common.force;
    match &cli.command {
        Command::Prune => {
            let r = cmd_prune(&cfg, force, false)?;
            println!(
                "pruned with {}: density {:.4}, mask {}{}",
                r.saliency.criterion,
                r.density,
                r.artifacts.mask.display(),
                if r.layers.collapsed { " (layer collapse)" } else { "" }
            );
        }
        Command::Train { mask } => {
            let r = cmd_train(&cfg, mask.as_deref(), force)?;
            println!("{}: final accuracy {:.4}", r.run_id, r.metrics.final_accuracy);
        }
        Command::Run => {
            let r = cmd_run(&cfg, force, false)?;
            println!("{}: final accuracy {:.4}", r.run_id, r.metrics.final_accuracy);
        }
        Command::Sweep { axis, values, seeds, jobs } => {
            let points = sweep_points(&cfg, (*axis).into(), values.as_deref(), *seeds)?;
            let outcome = cmd_sweep(&cfg, points, *jobs, force)?;
            println!("results: {}\nsummary: {}", outcome.results.display(), outcome.summary.display());
        }
        Command::CheckGrad { .. } => {
            #[cfg(feature = "fault-injection")]
            if let Command::CheckGrad { inject_adjoint_fault: true } = cli.command {
                prospr_core::autodiff::set_adjoint_fault(true);
            }
            let report = cmd_check_grad(&cfg)?;
            print!("{}", format_check_report(&cfg, &report));
            if !report.passed {
                return Err(CliError::GradCheckFailed { max: report.max_relative_error, tolerance: report.tolerance });
            }
        }
        Command::Report { results } => {
            let path = results.clone().unwrap_or_else(|| cfg.out.join(RESULTS_FILE));
            print!("{}", cmd_report(&path)?);
        }
    }
    Ok(())
}
