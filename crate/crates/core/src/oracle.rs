//! Independent checks for meta-gradients: central finite differences through
//! the full unroll, and a closed form for a one-parameter quadratic model.
//!
//! The finite-difference path never differentiates through an update; it only
//! evaluates `L(w_M(c), D_M)` for perturbed masks, using plain first-order
//! gradients for the inner SGD steps.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, RetainPolicy, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::nn::{apply_masks, ModelState, Objective, Param, ParamRole};
use crate::pruning::mask::MaskSpec;
use crate::tensor::Tensor;

/// `L = ½ (w x − y)²` for a single scalar weight; the batch is ignored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarQuadratic {
    pub x: f64,
    pub y: f64,
}

impl ScalarQuadratic {
    pub fn state(w_init: f64) -> ModelState {
        ModelState {
            params: vec![Param {
                name: "w".into(),
                layer: 0,
                role: ParamRole::Weight,
                value: Tensor::vector(vec![w_init]),
            }],
        }
    }

    /// Placeholder batch; the objective does not read it.
    pub fn batch() -> Batch {
        Batch { inputs: Tensor::zeros(&[1, 1]), labels: vec![0] }
    }

    pub fn batches(steps: usize) -> Vec<Batch> {
        vec![Self::batch(); steps + 1]
    }
}

impl Objective for ScalarQuadratic {
    fn loss(&self, g: &mut Graph, params: &[Var], _batch: &Batch) -> Result<Var> {
        let w = *params.first().ok_or_else(|| Error::InvalidArgument("quadratic needs one weight".into()))?;
        let wx = g.scale(w, self.x)?;
        let y = g.constant(Tensor::vector(vec![self.y]));
        let r = g.sub(wx, y)?;
        let r2 = g.mul(r, r)?;
        let half = g.scale(r2, 0.5)?;
        g.reshape(half, &[])
    }
}

/// Exact `dL(w_M)/dc` for [`ScalarQuadratic`] unrolled from `w_0 = c·w_init`:
/// `(w_M x − y) · x · (1 − α x²)^M · w_init`.
pub fn symbolic_quadratic_oracle(x: f64, y: f64, w_init: f64, c: f64, lr: f64, steps: usize) -> f64 {
    let mut w = c * w_init;
    for _ in 0..steps {
        w -= lr * x * (w * x - y);
    }
    (w * x - y) * x * (1.0 - lr * x * x).powi(steps as i32) * w_init
}

/// Loss after `batches.len() - 1` plain SGD steps from `w_0 = c ⊙ w_init`,
/// where `c` is given as flat mask-entry values.
pub fn unrolled_loss<O: Objective + ?Sized>(
    objective: &O,
    state: &ModelState,
    spec: &MaskSpec,
    mask_values: &[f64],
    batches: &[Batch],
    lr: f64,
) -> Result<f64> {
    let Some((eval, inner)) = batches.split_last() else {
        return Err(Error::InvalidArgument("unrolled loss needs at least one batch".into()));
    };
    if mask_values.len() != spec.total_entries() {
        return Err(Error::MaskMismatch(format!(
            "{} mask values for {} entries",
            mask_values.len(),
            spec.total_entries()
        )));
    }
    let mut g = Graph::new(RetainPolicy::Release);
    let masks: Vec<Var> = spec
        .groups
        .iter()
        .zip(spec.ranges())
        .map(|(grp, r)| g.constant(Tensor::from_parts(spec.mask_shape(grp), mask_values[r].to_vec())))
        .collect();
    let base: Vec<Var> = state.params.iter().map(|p| g.constant(p.value.clone())).collect();
    let masked = apply_masks(&mut g, state, spec, &base, &masks)?;
    let mut values: Vec<Tensor> = masked.iter().map(|&v| g.value(v).cloned()).collect::<Result<_>>()?;
    for (step, batch) in inner.iter().enumerate() {
        let params: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = objective.loss(&mut g, &params, batch).map_err(|_| Error::NonFiniteLoss { step })?;
        let grads = g.backward(loss, &params)?.into_tensors();
        values = values.iter().zip(&grads).map(|(w, d)| w.zip_map(d, |w, d| w - lr * d)).collect();
        g.end_step(&[])?;
    }
    let params: Vec<Var> = values.into_iter().map(|t| g.constant(t)).collect();
    let loss = objective.loss(&mut g, &params, eval).map_err(|_| Error::NonFiniteLoss { step: inner.len() })?;
    let v = g.value(loss)?.item();
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss { step: inner.len() });
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EntrySelection {
    All,
    /// A seeded sample of this many distinct entries (all, if fewer exist).
    Sample(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    /// Initial perturbation of the mask entry around 1.
    pub step: f64,
    pub entries: EntrySelection,
    pub seed: u64,
    /// How many times the step may be divided by 10 when the estimates at `h`
    /// and `h/2` disagree.
    pub refinements: usize,
    /// Relative agreement required between the `h` and `h/2` estimates.
    pub consistency: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step: 1e-5, entries: EntrySelection::Sample(64), seed: 0, refinements: 3, consistency: 1e-5 }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {}", self.step)));
        }
        if !(self.consistency > 0.0) {
            return Err(Error::InvalidArgument(format!("consistency must be > 0, got {}", self.consistency)));
        }
        Ok(())
    }

    /// Sorted flat entry indices to check.
    pub fn select(&self, total: usize) -> Vec<usize> {
        match self.entries {
            EntrySelection::Sample(n) if n < total => {
                let mut rng = stream(self.seed, Stream::FdEntries);
                let mut idx = sample(&mut rng, total, n).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..total).collect(),
        }
    }
}

/// One finite-difference estimate of `dL/dc_j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdEstimate {
    pub entry: usize,
    /// Central difference at `step / 2`.
    pub value: f64,
    /// The `h` that produced the accepted pair.
    pub step: f64,
    /// Rounding resolution of `value`: `4 ε max|L| / h`.
    pub resolution: f64,
    pub refinements: usize,
    /// False when the `h` and `h/2` estimates never agreed, which happens when
    /// every stencil straddles a point where the unrolled loss is not smooth.
    pub consistent: bool,
}

/// Central differences `(L(c_j = 1 + h) − L(c_j = 1 − h)) / 2h` for each
/// selected entry, with all other entries at 1 and the same batches for every
/// evaluation. Each entry is estimated at `h` and `h/2`; if the two disagree
/// the step is divided by 10 and the pair recomputed.
pub fn fd_meta_gradient<O: Objective + ?Sized>(
    objective: &O,
    state: &ModelState,
    spec: &MaskSpec,
    batches: &[Batch],
    lr: f64,
    cfg: &FdConfig,
) -> Result<Vec<FdEstimate>> {
    cfg.validate()?;
    let total = spec.total_entries();
    let mut c = vec![1.0; total];
    let mut out = Vec::new();
    for j in cfg.select(total) {
        let mut eval = |v: f64| -> Result<f64> {
            c[j] = v;
            let l = unrolled_loss(objective, state, spec, &c, batches, lr);
            c[j] = 1.0;
            l.map_err(|e| match e {
                Error::NonFiniteLoss { .. } => {
                    Error::InvalidArgument(format!("non-finite loss while perturbing mask entry {j}"))
                }
                other => other,
            })
        };
        let mut h = cfg.step;
        let mut refinements = 0;
        let estimate = loop {
            let (lp, lm) = (eval(1.0 + h)?, eval(1.0 - h)?);
            let (hp, hm) = (eval(1.0 + h / 2.0)?, eval(1.0 - h / 2.0)?);
            let coarse = (lp - lm) / (2.0 * h);
            let fine = (hp - hm) / h;
            let l_max = lp.abs().max(lm.abs()).max(hp.abs()).max(hm.abs());
            let resolution = 4.0 * f64::EPSILON * l_max / h;
            let consistent =
                (coarse - fine).abs() <= cfg.consistency * coarse.abs().max(fine.abs()) + 2.0 * resolution;
            if consistent || refinements == cfg.refinements {
                break FdEstimate { entry: j, value: fine, step: h, resolution, refinements, consistent };
            }
            h /= 10.0;
            refinements += 1;
        };
        out.push(estimate);
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`; zero when both are zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntryCheck {
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub max_relative_error: f64,
    pub median_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic per-entry gradients against finite-difference
/// estimates. Each entry's relative error uses `resolution / tolerance` as the
/// smallest denominator, so derivatives below what the difference quotient
/// can resolve are held to an absolute bound of one resolution unit.
pub fn compare(analytic: &[f64], numeric: &[FdEstimate], tolerance: f64) -> GradCheckReport {
    let entries: Vec<EntryCheck> = numeric
        .iter()
        .map(|e| EntryCheck {
            entry: e.entry,
            analytic: analytic[e.entry],
            numeric: e.value,
            relative_error: relative_error(analytic[e.entry], e.value, e.resolution / tolerance),
        })
        .collect();
    let mut errs: Vec<f64> = entries.iter().map(|e| e.relative_error).collect();
    errs.sort_by(f64::total_cmp);
    let max = errs.last().copied().unwrap_or(0.0);
    let median = if errs.is_empty() {
        0.0
    } else if errs.len() % 2 == 1 {
        errs[errs.len() / 2]
    } else {
        0.5 * (errs[errs.len() / 2 - 1] + errs[errs.len() / 2])
    };
    GradCheckReport {
        entries,
        max_relative_error: max,
        median_relative_error: median,
        tolerance,
        passed: max <= tolerance,
    }
}
