//! Network definitions, parameter initialization, checkpoints, and the masked
//! forward pass `w0 = c ⊙ w_init`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::pruning::mask::{Granularity, MaskSpec};
use crate::tensor::{Conv2dGeometry, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    /// Non-overlapping average pooling with stride equal to `kernel`.
    AvgPool { kernel: usize },
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }

    fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Linear { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some(vec![out_channels, in_channels, kernel, kernel])
            }
            _ => None,
        }
    }
}

/// A feed-forward stack of layers applied to `[batch, ...input_shape]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub value: Tensor,
}

impl Param {
    /// Only linear and convolution weights are prunable; biases never are.
    pub fn prunable(&self) -> bool {
        self.role == ParamRole::Weight
    }
}

/// Named parameters in layer order (weight before bias).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: Vec<Param>,
}

impl ModelState {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Same layout, new values (in parameter order).
    pub fn with_values(&self, values: Vec<Tensor>) -> ModelState {
        debug_assert_eq!(values.len(), self.params.len());
        ModelState {
            params: self
                .params
                .iter()
                .zip(values)
                .map(|(p, value)| Param { value, ..p.clone() })
                .collect(),
        }
    }

    pub fn num_prunable(&self) -> usize {
        self.params.iter().filter(|p| p.prunable()).map(|p| p.value.len()).sum()
    }
}

fn param_name(layer: usize, role: ParamRole) -> String {
    match role {
        ParamRole::Weight => format!("layer{layer:02}.weight"),
        ParamRole::Bias => format!("layer{layer:02}.bias"),
    }
}

impl Network {
    /// ReLU multi-layer perceptron over flattened inputs.
    pub fn mlp(name: impl Into<String>, input_shape: &[usize], widths: &[usize]) -> Network {
        let mut layers = vec![LayerSpec::Flatten];
        let mut prev = input_shape.iter().product();
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::Linear { inputs: prev, outputs: w });
            if i + 1 < widths.len() {
                layers.push(LayerSpec::Relu);
            }
            prev = w;
        }
        Network { name: name.into(), input_shape: input_shape.to_vec(), layers }
    }

    /// 784-300-100-10 perceptron for 28x28 single-channel images.
    pub fn mnist_mlp() -> Network {
        Network::mlp("mlp", &[1, 28, 28], &[300, 100, 10])
    }

    /// Six 3x3 convolutions in three stages (pooled between stages), global
    /// average pooling and a single linear classifier.
    pub fn small_vgg(in_channels: usize, side: usize, classes: usize) -> Network {
        let mut layers = Vec::new();
        let mut ch = in_channels;
        for (stage, width) in [16, 32, 64].into_iter().enumerate() {
            for _ in 0..2 {
                layers.push(LayerSpec::Conv2d {
                    in_channels: ch,
                    out_channels: width,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                });
                layers.push(LayerSpec::Relu);
                ch = width;
            }
            if stage < 2 {
                layers.push(LayerSpec::AvgPool { kernel: 2 });
            }
        }
        layers.push(LayerSpec::AvgPool { kernel: side / 4 });
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear { inputs: ch, outputs: classes });
        Network { name: "vgg".into(), input_shape: vec![in_channels, side, side], layers }
    }

    /// Per-sample activation shape after every layer; fails on incompatibility.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |shape: &[usize]| Error::InvalidArgument(format!(
                "{}: layer {i} ({layer:?}) cannot take input of shape {shape:?}",
                self.name
            ));
            shape = match *layer {
                LayerSpec::Linear { inputs, outputs } => match shape[..] {
                    [n] if n == inputs => vec![outputs],
                    _ => return Err(bad(&shape)),
                },
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                    let geom = Conv2dGeometry { stride, padding };
                    match shape[..] {
                        [c, h, w] if c == in_channels => {
                            let oh = geom.output_extent(h, kernel).ok_or_else(|| bad(&shape))?;
                            let ow = geom.output_extent(w, kernel).ok_or_else(|| bad(&shape))?;
                            vec![out_channels, oh, ow]
                        }
                        _ => return Err(bad(&shape)),
                    }
                }
                LayerSpec::Relu => shape,
                LayerSpec::AvgPool { kernel } => match shape[..] {
                    [c, h, w] if kernel > 0 && h % kernel == 0 && w % kernel == 0 => {
                        vec![c, h / kernel, w / kernel]
                    }
                    _ => return Err(bad(&shape)),
                },
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn num_outputs(&self) -> Result<usize> {
        let shapes = self.activation_shapes()?;
        match shapes.last().map(Vec::as_slice) {
            Some([n]) => Ok(*n),
            other => Err(Error::InvalidArgument(format!(
                "{}: network must end in a flat output, got {other:?}",
                self.name
            ))),
        }
    }

    /// `(name, layer, role, shape)` of every parameter, in order.
    pub fn param_layout(&self) -> Vec<(String, usize, ParamRole, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(ws) = layer.weight_shape() {
                let outs = ws[0];
                out.push((param_name(i, ParamRole::Weight), i, ParamRole::Weight, ws));
                out.push((param_name(i, ParamRole::Bias), i, ParamRole::Bias, vec![outs]));
            }
        }
        out
    }

    /// Logits for `input` of shape `[batch, ...input_shape]`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let mut x = input;
        let mut p = params.iter();
        let mut next = |what: &str| {
            p.next().copied().ok_or_else(|| Error::InvalidArgument(format!(
                "{}: missing {what} parameter",
                self.name
            )))
        };
        for layer in &self.layers {
            x = match *layer {
                LayerSpec::Linear { .. } => {
                    let (w, b) = (next("weight")?, next("bias")?);
                    let wt = g.transpose(w)?;
                    let y = g.matmul(x, wt)?;
                    let shape = g.value(y)?.shape().to_vec();
                    let bias = g.broadcast_to(b, &shape)?;
                    g.add(y, bias)?
                }
                LayerSpec::Conv2d { stride, padding, out_channels, .. } => {
                    let (w, b) = (next("weight")?, next("bias")?);
                    let y = g.conv2d(x, w, Conv2dGeometry { stride, padding })?;
                    let shape = g.value(y)?.shape().to_vec();
                    let b = g.reshape(b, &[out_channels, 1, 1])?;
                    let bias = g.broadcast_to(b, &shape)?;
                    g.add(y, bias)?
                }
                LayerSpec::Relu => g.relu(x)?,
                LayerSpec::AvgPool { kernel } => g.avg_pool(x, kernel)?,
                LayerSpec::Flatten => {
                    let shape = g.value(x)?.shape();
                    let rows = shape[0];
                    let cols = shape[1..].iter().product::<usize>();
                    g.reshape(x, &[rows, cols])?
                }
            };
        }
        Ok(x)
    }

    /// Logits computed outside any caller-visible graph.
    pub fn logits(&self, state: &ModelState, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::default();
        let params: Vec<Var> = state.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let x = g.constant(inputs.clone());
        let out = self.forward(&mut g, &params, x)?;
        Ok(g.value(out)?.clone())
    }
}

/// A scalar training loss over an ordered parameter list.
pub trait Objective {
    fn loss(&self, g: &mut Graph, params: &[Var], batch: &Batch) -> Result<Var>;
}

impl Objective for Network {
    fn loss(&self, g: &mut Graph, params: &[Var], batch: &Batch) -> Result<Var> {
        let x = g.constant(batch.inputs.clone());
        let logits = self.forward(g, params, x)?;
        let classes = g.value(logits)?.shape()[1];
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} does not fit {classes} network outputs"
            )));
        }
        g.softmax_cross_entropy(logits, &batch.labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitScheme {
    /// `U(-b, b)` with `b = sqrt(2 / fan_in)` for weights; zero biases.
    KaimingUniform,
    /// Parameters read from a checkpoint file.
    External(std::path::PathBuf),
}

pub fn init_params(net: &Network, seed: u64, scheme: &InitScheme) -> Result<ModelState> {
    net.activation_shapes()?;
    match scheme {
        InitScheme::KaimingUniform => {
            let mut rng = stream(seed, Stream::Init);
            let params = net
                .param_layout()
                .into_iter()
                .map(|(name, layer, role, shape)| {
                    let value = match role {
                        ParamRole::Weight => {
                            let fan_in: usize = shape[1..].iter().product();
                            let bound = (2.0 / fan_in as f64).sqrt();
                            let data = (0..shape.iter().product::<usize>())
                                .map(|_| rng.random_range(-bound..bound))
                                .collect();
                            Tensor::from_parts(shape, data)
                        }
                        ParamRole::Bias => Tensor::zeros(&shape),
                    };
                    Param { name, layer, role, value }
                })
                .collect();
            Ok(ModelState { params })
        }
        InitScheme::External(path) => state_from_named(net, read_checkpoint(path)?),
    }
}

/// Matches named tensors against the network's parameter layout.
pub fn state_from_named(net: &Network, named: Vec<(String, Tensor)>) -> Result<ModelState> {
    let layout = net.param_layout();
    let mut params = Vec::with_capacity(layout.len());
    for (name, layer, role, shape) in layout {
        let value = named
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Parameter { name: name.clone(), reason: "missing".into() })?;
        if value.shape() != shape.as_slice() {
            return Err(Error::Parameter {
                name,
                reason: format!("expected shape {shape:?}, found {:?}", value.shape()),
            });
        }
        params.push(Param { name, layer, role, value });
    }
    if let Some((extra, _)) = named.iter().find(|(n, _)| !params.iter().any(|p| &p.name == n)) {
        return Err(Error::Parameter { name: extra.clone(), reason: "not part of the network".into() });
    }
    Ok(ModelState { params })
}

/// Multiplies every prunable parameter by its mask variable. Under channel
/// granularity the mask entry for an output unit also gates that unit's bias,
/// so a zeroed entry silences the unit entirely.
pub fn apply_masks(
    g: &mut Graph,
    state: &ModelState,
    spec: &MaskSpec,
    params: &[Var],
    masks: &[Var],
) -> Result<Vec<Var>> {
    spec.check_model(state)?;
    if masks.len() != spec.groups.len() {
        return Err(Error::MaskMismatch(format!(
            "{} mask variables for {} prunable parameters",
            masks.len(),
            spec.groups.len()
        )));
    }
    let mut out = params.to_vec();
    for (group, &m) in spec.groups.iter().zip(masks) {
        let expected = spec.mask_shape(group);
        if g.value(m)?.shape() != expected.as_slice() {
            return Err(Error::MaskMismatch(format!(
                "mask for {} has shape {:?}, expected {:?}",
                group.param,
                g.value(m)?.shape(),
                expected
            )));
        }
        let w = params[group.param_index];
        out[group.param_index] = match spec.granularity {
            Granularity::PerWeight => g.mul(w, m)?,
            Granularity::PerChannel => {
                let mut col = vec![1; group.weight_shape.len()];
                col[0] = group.weight_shape[0];
                let m_col = g.reshape(m, &col)?;
                let m_full = g.broadcast_to(m_col, &group.weight_shape)?;
                let bias_index = group.param_index + 1;
                out[bias_index] = g.mul(params[bias_index], m)?;
                g.mul(w, m_full)?
            }
        };
    }
    Ok(out)
}

/// Loss of the model with `masks` applied multiplicatively to its parameters.
pub fn masked_forward(
    g: &mut Graph,
    net: &Network,
    state: &ModelState,
    spec: &MaskSpec,
    masks: &[Var],
    batch: &Batch,
) -> Result<Var> {
    let params: Vec<Var> = state.params.iter().map(|p| g.constant(p.value.clone())).collect();
    let masked = apply_masks(g, state, spec, &params, masks)?;
    net.loss(g, &masked, batch)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PRPRCKPT";
const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

/// Serializes named tensors: header (magic, version, count) then per-parameter
/// records of name, dtype tag, rank, extents and little-endian values.
pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for p in &state.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    fs::write(path, encode_checkpoint(state))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                reason: format!("truncated: needed {n} bytes at offset {}", self.pos),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: offset as u64, reason: reason.into() }
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(c.fail(0, "not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(c.fail(8, format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let at = c.pos;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| c.fail(at, "parameter name is not UTF-8"))?;
        let dtype_at = c.pos;
        let dtype = c.take(1)?[0];
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| c.fail(dtype_at, format!("extents {shape:?} overflow")))?;
        let data = match dtype {
            DTYPE_F64 => c
                .take(n * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => c
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect(),
            other => return Err(c.fail(dtype_at, format!("unknown dtype tag {other}"))),
        };
        let t = Tensor::new(shape, data).map_err(|e| c.fail(dtype_at, e.to_string()))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(c.fail(c.pos, "trailing bytes after last parameter"));
    }
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes, path)
}
