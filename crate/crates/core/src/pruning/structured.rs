//! Physical removal of pruned channels.

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelState, Network, Param};
use crate::pruning::mask::{Granularity, Mask};
use crate::tensor::Tensor;

/// Builds the smaller network obtained by deleting every output channel (or
/// unit) whose channel-mask entry is zero, together with the matching input
/// slices of the following layer. The last parametrized layer keeps its
/// outputs so logits stay aligned; its pruned units are zeroed instead.
pub fn shrink(net: &Network, state: &ModelState, mask: &Mask) -> Result<(Network, ModelState)> {
    if mask.spec().granularity != Granularity::PerChannel {
        return Err(Error::MaskMismatch("shrinking needs a per-channel mask".into()));
    }
    let masked = mask.apply(state)?;
    let shapes = net.activation_shapes()?;
    let last_param_layer = net.layers.iter().rposition(LayerSpec::has_params);

    // indices of the surviving features of the current activation
    let mut kept: Vec<usize> = (0..net.input_shape.iter().product()).collect();
    let mut kept_is_channels = net.input_shape.len() == 3;
    if kept_is_channels {
        kept = (0..net.input_shape[0]).collect();
    }
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut params = Vec::new();
    let mut group = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        let input_shape = if i == 0 { net.input_shape.clone() } else { shapes[i - 1].clone() };
        match *layer {
            LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. } => {
                let w = &masked.params[mask.spec().groups[group].param_index];
                let b = &masked.params[mask.spec().groups[group].param_index + 1];
                let outs = w.value.shape()[0];
                let keep_out: Vec<usize> = if Some(i) == last_param_layer {
                    (0..outs).collect()
                } else {
                    mask.group_bits(group).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect()
                };
                if keep_out.is_empty() {
                    return Err(Error::MaskMismatch(format!("{} keeps no channels", w.name)));
                }
                let (new_layer, new_w) = match *layer {
                    LayerSpec::Linear { inputs, .. } => {
                        let mut data = Vec::with_capacity(keep_out.len() * kept.len());
                        for &o in &keep_out {
                            data.extend(kept.iter().map(|&j| w.value.data()[o * inputs + j]));
                        }
                        (
                            LayerSpec::Linear { inputs: kept.len(), outputs: keep_out.len() },
                            Tensor::from_parts(vec![keep_out.len(), kept.len()], data),
                        )
                    }
                    LayerSpec::Conv2d { in_channels, kernel, stride, padding, .. } => {
                        let kk = kernel * kernel;
                        let mut data = Vec::with_capacity(keep_out.len() * kept.len() * kk);
                        for &o in &keep_out {
                            for &c in &kept {
                                let start = (o * in_channels + c) * kk;
                                data.extend_from_slice(&w.value.data()[start..start + kk]);
                            }
                        }
                        (
                            LayerSpec::Conv2d {
                                in_channels: kept.len(),
                                out_channels: keep_out.len(),
                                kernel,
                                stride,
                                padding,
                            },
                            Tensor::from_parts(vec![keep_out.len(), kept.len(), kernel, kernel], data),
                        )
                    }
                    _ => unreachable!(),
                };
                let new_b = Tensor::from_parts(vec![keep_out.len()], keep_out.iter().map(|&o| b.value.data()[o]).collect());
                params.push(Param { value: new_w, ..w.clone() });
                params.push(Param { value: new_b, ..b.clone() });
                layers.push(new_layer);
                kept = keep_out;
                kept_is_channels = matches!(layer, LayerSpec::Conv2d { .. });
                group += 1;
            }
            LayerSpec::Flatten => {
                if kept_is_channels {
                    let plane: usize = input_shape[1..].iter().product();
                    kept = kept.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect();
                    kept_is_channels = false;
                }
                layers.push(LayerSpec::Flatten);
            }
            ref other => layers.push(other.clone()),
        }
    }
    let small = Network { name: format!("{}-shrunk", net.name), input_shape: net.input_shape.clone(), layers };
    small.activation_shapes()?;
    Ok((small, ModelState { params }))
}
