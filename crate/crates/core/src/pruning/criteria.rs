//! Saliency criteria and global top-k mask selection.
//!
//! Every criterion produces a raw per-entry value `g_j` over the entries of a
//! [`MaskSpec`] and normalizes it to `s_j = |g_j| / Σ_k |g_k|`.

use std::time::Instant;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Graph, RetainPolicy, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::nn::{apply_masks, masked_forward, ModelState, Network, Objective};
use crate::pruning::mask::{Granularity, Mask, MaskSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    /// Exact meta-gradient through the unrolled SGD steps.
    Prospr,
    /// Final-step gradient times initial weights; no second-order terms.
    ProsprFirstOrder,
    Snip,
    Magnitude,
    Random,
}

impl Criterion {
    pub fn tag(self) -> &'static str {
        match self {
            Criterion::Prospr => "prospr",
            Criterion::ProsprFirstOrder => "prospr-fo",
            Criterion::Snip => "snip",
            Criterion::Magnitude => "magnitude",
            Criterion::Random => "random",
        }
    }

    pub fn from_tag(s: &str) -> Option<Criterion> {
        [
            Criterion::Prospr,
            Criterion::ProsprFirstOrder,
            Criterion::Snip,
            Criterion::Magnitude,
            Criterion::Random,
        ]
        .into_iter()
        .find(|c| c.tag() == s)
    }

    /// Whether the criterion consumes data batches.
    pub fn uses_data(self) -> bool {
        matches!(self, Criterion::Prospr | Criterion::ProsprFirstOrder | Criterion::Snip)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub criterion: Criterion,
    pub granularity: Granularity,
    /// Unrolled SGD steps before the scored loss (0 for single-batch criteria).
    pub steps: usize,
    /// Normalized scores `s_j`, one per mask entry.
    pub scores: Vec<f64>,
    /// Signed raw values `g_j` the scores were derived from.
    pub raw: Vec<f64>,
    /// `Σ |g_j|`.
    pub normalizer: f64,
    pub batches_consumed: usize,
    pub elapsed_seconds: f64,
    /// Set when every `g_j` was zero and magnitudes were used instead.
    pub magnitude_fallback: bool,
}

impl SaliencyReport {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.raw.iter().map(|g| g.abs()).collect()
    }
}

/// `|g_j| / Σ|g_k|`, or `None` when every entry is zero.
pub fn normalize(raw: &[f64]) -> Option<(Vec<f64>, f64)> {
    let total: f64 = raw.iter().map(|g| g.abs()).sum();
    if total > 0.0 {
        Some((raw.iter().map(|g| g.abs() / total).collect(), total))
    } else {
        None
    }
}

fn flatten(grads: GradientMap) -> Vec<f64> {
    grads.into_tensors().into_iter().flat_map(Tensor::into_data).collect()
}

/// Scores and normalizes, falling back to magnitude ordering on all-zero input.
fn finish(
    criterion: Criterion,
    spec: &MaskSpec,
    state: &ModelState,
    raw: Vec<f64>,
    steps: usize,
    batches: usize,
    started: Instant,
) -> SaliencyReport {
    let (scores, normalizer, fallback) = match normalize(&raw) {
        Some((s, n)) => (s, n, false),
        None => {
            warn!("{}: every saliency is zero; ranking by weight magnitude instead", criterion.tag());
            let magnitude = magnitude_raw(state, spec);
            match normalize(&magnitude) {
                Some((s, _)) => (s, 0.0, true),
                None => (vec![1.0 / raw.len() as f64; raw.len()], 0.0, true),
            }
        }
    };
    SaliencyReport {
        criterion,
        granularity: spec.granularity,
        steps,
        scores,
        raw,
        normalizer,
        batches_consumed: batches,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        magnitude_fallback: fallback,
    }
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

fn finite_loss(g: &Graph, loss: Var, step: usize) -> Result<()> {
    if g.value(loss)?.item().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// Exact gradient of `L(w_M, D_M)` with respect to an all-ones mask, where
/// `w_0 = c ⊙ w_init` and `w_{i+1} = w_i - lr ∇L(w_i, D_i)` for the first
/// `M = batches.len() - 1` batches. Entries are grouped per prunable
/// parameter and named after it.
///
/// `policy` must be [`RetainPolicy::Keep`] when `M > 0`; with
/// [`RetainPolicy::Release`] the call fails with [`Error::GraphTruncated`].
pub fn meta_gradient<O: Objective + ?Sized>(
    objective: &O,
    state: &ModelState,
    spec: &MaskSpec,
    batches: &[Batch],
    lr: f64,
    policy: RetainPolicy,
) -> Result<GradientMap> {
    let Some((eval, inner)) = batches.split_last() else {
        return Err(Error::InvalidArgument("meta-gradient needs at least one batch".into()));
    };
    let mut g = Graph::new(policy);
    let masks = spec.ones_leaves(&mut g);
    let init: Vec<Var> = state.params.iter().map(|p| g.named_leaf(p.name.clone(), p.value.clone(), true)).collect();
    let mut params = apply_masks(&mut g, state, spec, &init, &masks)?;
    for (step, batch) in inner.iter().enumerate() {
        let loss = objective.loss(&mut g, &params, batch).map_err(at_step(step))?;
        finite_loss(&g, loss, step)?;
        let grads = g.grad(loss, &params).map_err(at_step(step))?;
        let mut next = Vec::with_capacity(params.len());
        for (&w, d) in params.iter().zip(grads) {
            let s = g.scale(d, lr).map_err(at_step(step))?;
            next.push(g.sub(w, s).map_err(at_step(step))?);
        }
        params = g.end_step(&next)?;
    }
    let steps = inner.len();
    let loss = objective.loss(&mut g, &params, eval).map_err(at_step(steps))?;
    finite_loss(&g, loss, steps)?;
    g.backward(loss, &masks)
}

/// First-order approximation: runs the `M` updates without differentiating
/// through them, then combines `∇_{w_M} L(w_M, D_M)` with `w_init` entrywise
/// (summed per group for channel masks). Only one step is kept in memory.
pub fn first_order_meta_gradient<O: Objective + ?Sized>(
    objective: &O,
    state: &ModelState,
    spec: &MaskSpec,
    batches: &[Batch],
    lr: f64,
) -> Result<GradientMap> {
    let Some((eval, inner)) = batches.split_last() else {
        return Err(Error::InvalidArgument("meta-gradient needs at least one batch".into()));
    };
    spec.check_model(state)?;
    let mut g = Graph::new(RetainPolicy::Release);
    let mut params: Vec<Var> = state.params.iter().map(|p| g.leaf(p.value.clone(), true)).collect();
    for (step, batch) in inner.iter().enumerate() {
        let loss = objective.loss(&mut g, &params, batch).map_err(at_step(step))?;
        finite_loss(&g, loss, step)?;
        let grads = g.backward(loss, &params)?.into_tensors();
        let mut next = Vec::with_capacity(params.len());
        for (&w, d) in params.iter().zip(grads) {
            let updated = g.value(w)?.zip_map(&d, |w, d| w - lr * d);
            if !updated.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            next.push(g.leaf(updated, true));
        }
        params = g.end_step(&next)?;
    }
    let steps = inner.len();
    let loss = objective.loss(&mut g, &params, eval).map_err(at_step(steps))?;
    finite_loss(&g, loss, steps)?;
    let final_grads = g.backward(loss, &params)?.into_tensors();

    let entries = spec.groups.iter().map(|grp| {
        let w_init = &state.params[grp.param_index].value;
        let prod = final_grads[grp.param_index].zip_map(w_init, |d, w| d * w);
        let t = match spec.granularity {
            Granularity::PerWeight => prod,
            Granularity::PerChannel => {
                let rows = grp.weight_shape[0];
                let per_row = prod.len() / rows;
                let b_init = &state.params[grp.param_index + 1].value;
                let b_grad = &final_grads[grp.param_index + 1];
                let data = (0..rows)
                    .map(|r| {
                        prod.data()[r * per_row..(r + 1) * per_row].iter().sum::<f64>()
                            + b_grad.data()[r] * b_init.data()[r]
                    })
                    .collect();
                Tensor::from_parts(vec![rows], data)
            }
        };
        (grp.param.clone(), t)
    });
    Ok(GradientMap::from_named(entries))
}

fn require_steps(batches: &[Batch], lr: f64) -> Result<usize> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("need M+1 >= 1 batches".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("meta learning rate must be >= 0, got {lr}")));
    }
    Ok(batches.len() - 1)
}

/// Exact meta-gradient saliency over `M = batches.len() - 1` unrolled steps.
/// `M = 0` reduces to scoring the loss at initialization.
pub fn prospr_scores<O: Objective + ?Sized>(
    objective: &O,
    state: &ModelState,
    spec: &MaskSpec,
    batches: &[Batch],
    lr: f64,
) -> Result<SaliencyReport> {
    let started = Instant::now();
    let steps = require_steps(batches, lr)?;
    let raw = flatten(meta_gradient(objective, state, spec, batches, lr, RetainPolicy::Keep)?);
    Ok(finish(Criterion::Prospr, spec, state, raw, steps, batches.len(), started))
}

pub fn prospr_first_order_scores<O: Objective + ?Sized>(
    objective: &O,
    state: &ModelState,
    spec: &MaskSpec,
    batches: &[Batch],
    lr: f64,
) -> Result<SaliencyReport> {
    let started = Instant::now();
    let steps = require_steps(batches, lr)?;
    let raw = flatten(first_order_meta_gradient(objective, state, spec, batches, lr)?);
    Ok(finish(Criterion::ProsprFirstOrder, spec, state, raw, steps, batches.len(), started))
}

/// Connection sensitivity at initialization on a single batch.
pub fn snip_scores(net: &Network, state: &ModelState, spec: &MaskSpec, batch: &Batch) -> Result<SaliencyReport> {
    let started = Instant::now();
    let mut g = Graph::new(RetainPolicy::Release);
    let masks = spec.ones_leaves(&mut g);
    let loss = masked_forward(&mut g, net, state, spec, &masks, batch).map_err(at_step(0))?;
    finite_loss(&g, loss, 0)?;
    let raw = flatten(g.backward(loss, &masks)?);
    Ok(finish(Criterion::Snip, spec, state, raw, 0, 1, started))
}

/// `|w|` per weight, or the L2 norm of each channel's weights.
fn magnitude_raw(state: &ModelState, spec: &MaskSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.total_entries());
    for grp in &spec.groups {
        let w = state.params[grp.param_index].value.data();
        match spec.granularity {
            Granularity::PerWeight => out.extend(w.iter().map(|v| v.abs())),
            Granularity::PerChannel => {
                let per_row = w.len() / grp.weight_shape[0];
                out.extend(w.chunks(per_row).map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt()));
            }
        }
    }
    out
}

pub fn magnitude_scores(state: &ModelState, spec: &MaskSpec) -> Result<SaliencyReport> {
    let started = Instant::now();
    spec.check_model(state)?;
    let raw = magnitude_raw(state, spec);
    Ok(finish(Criterion::Magnitude, spec, state, raw, 0, 0, started))
}

/// I.i.d. uniform scores in `(0, 1]`.
pub fn random_scores(state: &ModelState, spec: &MaskSpec, seed: u64) -> Result<SaliencyReport> {
    let started = Instant::now();
    spec.check_model(state)?;
    let mut rng = stream(seed, Stream::Scores);
    let raw = (0..spec.total_entries()).map(|_| 1.0 - rng.random::<f64>()).collect();
    Ok(finish(Criterion::Random, spec, state, raw, 0, 0, started))
}

/// `round(density * m)`, halves rounding up.
pub fn retained_count(entries: usize, density: f64) -> usize {
    (density * entries as f64 + 0.5).floor() as usize
}

/// Keeps exactly `round(density * m)` entries with the highest scores across
/// the whole network. Equal scores are broken by ascending entry index.
pub fn top_k_mask(scores: &[f64], spec: &MaskSpec, density: f64) -> Result<Mask> {
    let m = spec.total_entries();
    if scores.len() != m {
        return Err(Error::MaskMismatch(format!("{} scores for {m} mask entries", scores.len())));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!("density must lie in (0, 1], got {density}")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {i} is NaN")));
    }
    let k = retained_count(m, density);
    if k == 0 {
        return Err(Error::EmptyMask { density, entries: m });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut bits = vec![false; m];
    for &i in &order[..k] {
        bits[i] = true;
    }
    Mask::new(spec.clone(), bits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRetention {
    pub param: String,
    pub retained: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub layers: Vec<LayerRetention>,
    /// True iff some prunable parameter keeps no entries.
    pub collapsed: bool,
}

impl CollapseReport {
    pub fn collapsed_layers(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| l.retained == 0).map(|l| l.param.as_str()).collect()
    }
}

pub fn layer_collapse_report(mask: &Mask) -> CollapseReport {
    let layers: Vec<LayerRetention> = mask
        .spec()
        .groups
        .iter()
        .enumerate()
        .map(|(i, grp)| {
            let bits = mask.group_bits(i);
            LayerRetention { param: grp.param.clone(), retained: bits.iter().filter(|&&b| b).count(), total: bits.len() }
        })
        .collect();
    let collapsed = layers.iter().any(|l| l.retained == 0);
    CollapseReport { layers, collapsed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, InitScheme, Network};

    fn setup() -> (ModelState, MaskSpec) {
        let s = init_params(&Network::mlp("m", &[2], &[2]), 0, &InitScheme::KaimingUniform).unwrap();
        let spec = MaskSpec::for_model(&s, Granularity::PerWeight);
        (s, spec)
    }

    #[test]
    fn top_k_examples() {
        let (_, spec) = setup();
        let m = top_k_mask(&[0.4, 0.3, 0.2, 0.1], &spec, 0.5).unwrap();
        assert_eq!(m.bits(), &[true, true, false, false]);
        assert_eq!(top_k_mask(&[0.4, 0.3, 0.2, 0.1], &spec, 1.0).unwrap().retained(), 4);
        let tied = top_k_mask(&[0.5; 4], &spec, 0.5).unwrap();
        assert_eq!(tied.bits(), &[true, true, false, false]);
        assert!(matches!(top_k_mask(&[0.5; 4], &spec, 0.1), Err(Error::EmptyMask { .. })));
        assert!(top_k_mask(&[0.5; 4], &spec, 0.0).is_err());
        assert!(top_k_mask(&[0.5; 4], &spec, 1.5).is_err());
        assert!(top_k_mask(&[0.5; 3], &spec, 0.5).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(retained_count(10, 0.25), 3);
        assert_eq!(retained_count(10, 0.24), 2);
        assert_eq!(retained_count(4, 0.125), 1);
    }

    #[test]
    fn magnitude_retains_largest() {
        let (mut s, _) = setup();
        s.params[0].value = Tensor::new(vec![1, 3], vec![3.0, -4.0, 1.0]).unwrap();
        s.params[1].value = Tensor::zeros(&[1]);
        let spec = MaskSpec::for_model(&s, Granularity::PerWeight);
        let r = magnitude_scores(&s, &spec).unwrap();
        let mask = top_k_mask(&r.scores, &spec, 2.0 / 3.0).unwrap();
        assert_eq!(mask.bits(), &[true, true, false]);
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn structured_magnitude_uses_row_norms() {
        let (mut s, _) = setup();
        s.params[0].value = Tensor::new(vec![2, 2], vec![3.0, 4.0, 1.0, 0.0]).unwrap();
        let spec = MaskSpec::for_model(&s, Granularity::PerChannel);
        let r = magnitude_scores(&s, &spec).unwrap();
        assert_eq!(r.raw, vec![5.0, 1.0]);
    }

    #[test]
    fn random_is_seeded() {
        let s = init_params(&Network::mlp("m", &[8], &[4]), 0, &InitScheme::KaimingUniform).unwrap();
        let spec = MaskSpec::for_model(&s, Granularity::PerWeight);
        let a = random_scores(&s, &spec, 1).unwrap();
        let b = random_scores(&s, &spec, 1).unwrap();
        let c = random_scores(&s, &spec, 2).unwrap();
        assert_eq!(a.scores, b.scores);
        let ma = top_k_mask(&a.scores, &spec, 0.5).unwrap();
        let mc = top_k_mask(&c.scores, &spec, 0.5).unwrap();
        assert_eq!(ma.retained(), 16);
        assert_ne!(ma, mc);
    }

    #[test]
    fn collapse_detection() {
        let s = init_params(&Network::mlp("m", &[3], &[2, 2]), 0, &InitScheme::KaimingUniform).unwrap();
        let spec = MaskSpec::for_model(&s, Granularity::PerWeight);
        let ones = Mask::all_ones(spec.clone());
        assert!(!layer_collapse_report(&ones).collapsed);
        let mut bits = vec![true; 10];
        for b in &mut bits[6..] {
            *b = false;
        }
        let r = layer_collapse_report(&Mask::new(spec, bits).unwrap());
        assert!(r.collapsed);
        assert_eq!(r.collapsed_layers(), vec!["layer03.weight"]);
    }

    #[test]
    fn all_zero_gradients_fall_back_to_magnitude() {
        let (s, spec) = setup();
        let r = finish(Criterion::Snip, &spec, &s, vec![0.0; 4], 0, 1, Instant::now());
        assert!(r.magnitude_fallback);
        let mag = magnitude_scores(&s, &spec).unwrap();
        assert_eq!(r.scores, mag.scores);
    }

    #[test]
    fn criterion_tags_roundtrip() {
        for c in [Criterion::Prospr, Criterion::ProsprFirstOrder, Criterion::Snip, Criterion::Magnitude, Criterion::Random] {
            assert_eq!(Criterion::from_tag(c.tag()), Some(c));
        }
        assert_eq!(Criterion::from_tag("grasp"), None);
    }
}
