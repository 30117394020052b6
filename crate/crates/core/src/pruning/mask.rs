//! Mask layout ([`MaskSpec`]), binary masks, and the mask file format.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ModelState, ParamRole};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    /// One mask entry per weight.
    PerWeight,
    /// One entry per conv output channel or linear output unit.
    PerChannel,
}

impl Granularity {
    fn tag(self) -> u8 {
        match self {
            Granularity::PerWeight => 0,
            Granularity::PerChannel => 1,
        }
    }
}

/// The mask slot of one prunable parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGroup {
    pub param: String,
    pub param_index: usize,
    pub weight_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub granularity: Granularity,
    pub groups: Vec<MaskGroup>,
}

impl MaskSpec {
    pub fn for_model(state: &ModelState, granularity: Granularity) -> MaskSpec {
        let groups = state
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.prunable())
            .map(|(i, p)| MaskGroup {
                param: p.name.clone(),
                param_index: i,
                weight_shape: p.value.shape().to_vec(),
            })
            .collect();
        MaskSpec { granularity, groups }
    }

    pub fn mask_shape(&self, group: &MaskGroup) -> Vec<usize> {
        match self.granularity {
            Granularity::PerWeight => group.weight_shape.clone(),
            Granularity::PerChannel => vec![group.weight_shape[0]],
        }
    }

    pub fn group_len(&self, group: &MaskGroup) -> usize {
        self.mask_shape(group).iter().product()
    }

    pub fn total_entries(&self) -> usize {
        self.groups.iter().map(|g| self.group_len(g)).sum()
    }

    /// Flat entry range of every group, in parameter order.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.groups
            .iter()
            .map(|g| {
                let r = start..start + self.group_len(g);
                start = r.end;
                r
            })
            .collect()
    }

    /// All-ones mask leaves, one per group, named after their parameter.
    pub fn ones_leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.groups
            .iter()
            .map(|grp| g.named_leaf(grp.param.clone(), Tensor::ones(&self.mask_shape(grp)), true))
            .collect()
    }

    /// Fails unless every prunable parameter of `state` has a matching slot.
    pub fn check_model(&self, state: &ModelState) -> Result<()> {
        let expected = MaskSpec::for_model(state, self.granularity);
        if expected.groups.len() != self.groups.len() {
            return Err(Error::MaskMismatch(format!(
                "model has {} prunable parameters, mask covers {}",
                expected.groups.len(),
                self.groups.len()
            )));
        }
        for (e, g) in expected.groups.iter().zip(&self.groups) {
            if e != g {
                return Err(Error::MaskMismatch(format!(
                    "parameter {} {:?} does not match mask slot {} {:?}",
                    e.param, e.weight_shape, g.param, g.weight_shape
                )));
            }
        }
        if self.granularity == Granularity::PerChannel {
            for g in &self.groups {
                let bias = state.params.get(g.param_index + 1);
                if !bias.is_some_and(|b| b.role == ParamRole::Bias && b.value.shape() == [g.weight_shape[0]]) {
                    return Err(Error::MaskMismatch(format!("{} has no matching bias", g.param)));
                }
            }
        }
        Ok(())
    }
}

/// Binary retention pattern over the entries of a [`MaskSpec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    spec: MaskSpec,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(spec: MaskSpec, bits: Vec<bool>) -> Result<Mask> {
        if bits.len() != spec.total_entries() {
            return Err(Error::MaskMismatch(format!(
                "{} mask bits for {} entries",
                bits.len(),
                spec.total_entries()
            )));
        }
        Ok(Mask { spec, bits })
    }

    pub fn all_ones(spec: MaskSpec) -> Mask {
        let n = spec.total_entries();
        Mask { spec, bits: vec![true; n] }
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn retained(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.retained() as f64 / self.bits.len() as f64
    }

    pub fn group_bits(&self, group: usize) -> &[bool] {
        &self.bits[self.spec.ranges()[group].clone()]
    }

    /// 0/1 tensors in mask-entry shape, one per group.
    pub fn group_tensors(&self) -> Vec<Tensor> {
        self.spec
            .groups
            .iter()
            .zip(self.spec.ranges())
            .map(|(g, r)| {
                let data = self.bits[r].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                Tensor::from_parts(self.spec.mask_shape(g), data)
            })
            .collect()
    }

    /// 0/1 multiplier for every parameter of the model (weights and biases),
    /// in parameter order. Unmasked parameters get all ones.
    pub fn param_multipliers(&self, state: &ModelState) -> Result<Vec<Tensor>> {
        self.spec.check_model(state)?;
        let mut out: Vec<Tensor> = state.params.iter().map(|p| Tensor::ones(p.value.shape())).collect();
        for (g, m) in self.spec.groups.iter().zip(self.group_tensors()) {
            match self.spec.granularity {
                Granularity::PerWeight => out[g.param_index] = m,
                Granularity::PerChannel => {
                    let rows = g.weight_shape[0];
                    let per_row: usize = g.weight_shape[1..].iter().product();
                    let data = (0..rows * per_row).map(|i| m.data()[i / per_row]).collect();
                    out[g.param_index] = Tensor::from_parts(g.weight_shape.clone(), data);
                    out[g.param_index + 1] = m;
                }
            }
        }
        Ok(out)
    }

    /// `c ⊙ w`: the model with pruned entries set to zero.
    pub fn apply(&self, state: &ModelState) -> Result<ModelState> {
        let mult = self.param_multipliers(state)?;
        let values = state.params.iter().zip(&mult).map(|(p, m)| p.value.zip_map(m, |a, b| a * b)).collect();
        Ok(state.with_values(values))
    }
}

const MASK_MAGIC: &[u8; 8] = b"PRPRMASK";
const MASK_VERSION: u32 = 1;

/// Header, spec descriptor (granularity, then per group: name, parameter
/// index, weight extents), then one byte per entry in parameter order.
pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let spec = mask.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.push(spec.granularity.tag());
    out.extend_from_slice(&(spec.groups.len() as u32).to_le_bytes());
    for g in &spec.groups {
        out.extend_from_slice(&(g.param.len() as u32).to_le_bytes());
        out.extend_from_slice(g.param.as_bytes());
        out.extend_from_slice(&(g.param_index as u32).to_le_bytes());
        out.extend_from_slice(&(g.weight_shape.len() as u32).to_le_bytes());
        for &d in &g.weight_shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    out.extend(mask.bits().iter().map(|&b| b as u8));
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<(usize, &[u8])> {
        if pos.checked_add(n).is_none_or(|end| end > bytes.len()) {
            return Err(fail(bytes.len(), format!("truncated: needed {n} bytes at offset {pos}")));
        }
        let at = pos;
        pos += n;
        Ok((at, &bytes[at..at + n]))
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    if take(8)?.1 != MASK_MAGIC {
        return Err(fail(0, "not a mask file (bad magic)".into()));
    }
    let version = u32_at(take(4)?.1);
    if version != MASK_VERSION {
        return Err(fail(8, format!("unsupported mask version {version}")));
    }
    let (at, tag) = take(1)?;
    let granularity = match tag[0] {
        0 => Granularity::PerWeight,
        1 => Granularity::PerChannel,
        other => return Err(fail(at, format!("unknown granularity tag {other}"))),
    };
    let count = u32_at(take(4)?.1) as usize;
    let mut groups = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?.1) as usize;
        let (at, name) = take(len)?;
        let param = String::from_utf8(name.to_vec())
            .map_err(|_| fail(at, "parameter name is not UTF-8".into()))?;
        let param_index = u32_at(take(4)?.1) as usize;
        let rank = u32_at(take(4)?.1) as usize;
        let mut weight_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            weight_shape.push(u64::from_le_bytes(take(8)?.1.try_into().expect("8 bytes")) as usize);
        }
        let overflow = weight_shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none();
        if weight_shape.is_empty() || weight_shape.contains(&0) || overflow {
            return Err(fail(at, format!("invalid extents {weight_shape:?} for {param}")));
        }
        groups.push(MaskGroup { param, param_index, weight_shape });
    }
    let spec = MaskSpec { granularity, groups };
    let n = spec.total_entries();
    let (start, raw) = take(n)?;
    let mut bits = Vec::with_capacity(n);
    for (i, &b) in raw.iter().enumerate() {
        match b {
            0 => bits.push(false),
            1 => bits.push(true),
            other => return Err(fail(start + i, format!("mask byte {other} is not 0 or 1"))),
        }
    }
    if pos != bytes.len() {
        return Err(fail(pos, "trailing bytes after mask entries".into()));
    }
    Mask::new(spec, bits)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, encode_mask(mask)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_mask(&bytes, path)
}
