//! Scoring followed by global top-k selection, shared by the command-line
//! runner and the acceptance checks.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sampler, SamplerConfig, SamplerMode};
use crate::error::{Error, Result};
use crate::nn::{ModelState, Network};
use crate::pruning::{
    layer_collapse_report, magnitude_scores, prospr_first_order_scores, prospr_scores, random_scores, snip_scores,
    top_k_mask, CollapseReport, Criterion, Granularity, Mask, MaskSpec, SaliencyReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub criterion: Criterion,
    pub granularity: Granularity,
    /// Fraction of mask entries kept, in `(0, 1]`.
    pub density: f64,
    /// Unrolled steps `M`; the scored loss uses batch `M + 1`.
    pub meta_steps: usize,
    pub meta_lr: f64,
    pub meta_batch_size: usize,
    pub sampler: SamplerMode,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            criterion: Criterion::Prospr,
            granularity: Granularity::PerWeight,
            density: 0.05,
            meta_steps: 3,
            meta_lr: 0.1,
            meta_batch_size: 512,
            sampler: SamplerMode::ClassBalanced,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub report: SaliencyReport,
    pub mask: Mask,
    pub collapse: CollapseReport,
}

/// Scores every mask entry of `state` and keeps the top `density` fraction.
/// Layer collapse is reported and logged but not fatal.
pub fn prune(net: &Network, state: &ModelState, train: &Dataset, cfg: &PruneConfig) -> Result<PruneOutcome> {
    let spec = MaskSpec::for_model(state, cfg.granularity);
    spec.check_model(state)?;
    let batches = |n: usize| -> Result<_> {
        let mut sampler = Sampler::new(
            train,
            SamplerConfig { batch_size: cfg.meta_batch_size, mode: cfg.sampler, seed: cfg.seed },
        )?;
        Ok(sampler.take(n))
    };
    let report = match cfg.criterion {
        Criterion::Prospr => prospr_scores(net, state, &spec, &batches(cfg.meta_steps + 1)?, cfg.meta_lr)?,
        Criterion::ProsprFirstOrder => {
            prospr_first_order_scores(net, state, &spec, &batches(cfg.meta_steps + 1)?, cfg.meta_lr)?
        }
        Criterion::Snip => snip_scores(net, state, &spec, &batches(1)?[0])?,
        Criterion::Magnitude => magnitude_scores(state, &spec)?,
        Criterion::Random => random_scores(state, &spec, cfg.seed)?,
    };
    if report.scores.len() != spec.total_entries() {
        return Err(Error::MaskMismatch(format!(
            "{} scores for {} mask entries",
            report.scores.len(),
            spec.total_entries()
        )));
    }
    let mask = top_k_mask(&report.scores, &spec, cfg.density)?;
    let collapse = layer_collapse_report(&mask);
    if collapse.collapsed {
        warn!("layer collapse: {} retain no entries", collapse.collapsed_layers().join(", "));
    }
    Ok(PruneOutcome { report, mask, collapse })
}
