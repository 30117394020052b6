//! Dense row-major `f64` tensors and the numeric kernels behind the autodiff ops.
//!
//! Kernels here are pure functions of their inputs: no hidden state and no
//! threading, so results are bit-reproducible for fixed inputs.

use std::fmt;

use crate::error::{Error, Result};

/// Dense n-dimensional array. `shape` may be empty, which denotes a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from parts the caller has already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch { op, lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    Ok(())
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same("add", a, b)?;
    Ok(a.zip_map(b, |x, y| x + y))
}

pub(crate) fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same("sub", a, b)?;
    Ok(a.zip_map(b, |x, y| x - y))
}

pub(crate) fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same("mul", a, b)?;
    Ok(a.zip_map(b, |x, y| x * y))
}

fn as_matrix(op: &'static str, t: &Tensor, other: &Tensor) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::ShapeMismatch { op, lhs: t.shape.clone(), rhs: other.shape.clone() }),
    }
}

/// `[m,k] x [k,n] -> [m,n]`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix("matmul", a, b)?;
    let (k2, n) = as_matrix("matmul", b, a)?;
    if k != k2 {
        return Err(Error::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c (+)= op(a) * op(b)` where `op` optionally transposes a row-major operand.
/// `a` is logically `[m,k]` and `b` is `[k,n]` after the optional transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the logical extents asserted above, and the
    // strides describe row-major (or transposed row-major) layouts of them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = match a.shape[..] {
        [r, c] => (r, c),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: a.shape.clone(),
                rhs: vec![],
            })
        }
    };
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Aligns `from` against `to` from the trailing axis; returns the padded
/// source shape, or `None` when `from` cannot broadcast to `to`.
fn broadcast_layout(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from.len() > to.len() {
        return None;
    }
    let mut padded = vec![1; to.len() - from.len()];
    padded.extend_from_slice(from);
    for (&f, &t) in padded.iter().zip(to) {
        if f != t && f != 1 {
            return None;
        }
    }
    Some(padded)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `to`, the flat index of the broadcast source.
fn broadcast_index_map(padded_from: &[usize], to: &[usize]) -> Vec<usize> {
    let from_strides = strides(padded_from);
    let total = numel(to);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..total {
        let mut src = 0;
        for d in 0..to.len() {
            if padded_from[d] != 1 {
                src += idx[d] * from_strides[d];
            }
        }
        out.push(src);
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn broadcast_to(a: &Tensor, to: &[usize]) -> Result<Tensor> {
    let padded = broadcast_layout(&a.shape, to).ok_or_else(|| Error::ShapeMismatch {
        op: "broadcast_to",
        lhs: a.shape.clone(),
        rhs: to.to_vec(),
    })?;
    if padded == to {
        return Ok(Tensor::from_parts(to.to_vec(), a.data.clone()));
    }
    let map = broadcast_index_map(&padded, to);
    Ok(Tensor::from_parts(to.to_vec(), map.into_iter().map(|i| a.data[i]).collect()))
}

/// Reduces `a` by summation to `to`, the inverse layout of [`broadcast_to`].
pub(crate) fn sum_to(a: &Tensor, to: &[usize]) -> Result<Tensor> {
    let padded = broadcast_layout(to, &a.shape).ok_or_else(|| Error::ShapeMismatch {
        op: "sum_to",
        lhs: a.shape.clone(),
        rhs: to.to_vec(),
    })?;
    if padded == a.shape {
        return Ok(Tensor::from_parts(to.to_vec(), a.data.clone()));
    }
    let map = broadcast_index_map(&padded, &a.shape);
    let mut out = vec![0.0; numel(to)];
    for (v, i) in a.data.iter().zip(map) {
        out[i] += v;
    }
    Ok(Tensor::from_parts(to.to_vec(), out))
}

/// Row-wise softmax over the last axis of a `[rows, cols]` tensor.
pub(crate) fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match a.shape[..] {
        [r, c] => (r, c),
        _ => return Err(Error::ShapeMismatch { op: "softmax", lhs: a.shape.clone(), rhs: vec![] }),
    };
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &a.data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub(crate) fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, cols) = match logits.shape[..] {
        [r, c] if r == labels.len() => (r, c),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: logits.shape.clone(),
                rhs: vec![labels.len()],
            })
        }
    };
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= cols {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {cols} logits"
            )));
        }
        let row = &logits.data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(Tensor::scalar(total / rows as f64))
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut out = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        out[r * classes + l] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], out)
}

/// Geometry of a 2-D convolution; NCHW activations, OIHW kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(
    op: &'static str,
    input: &[usize],
    kernel: &[usize],
    geom: Conv2dGeometry,
) -> Result<ConvDims> {
    let err = || Error::ShapeMismatch { op, lhs: input.to_vec(), rhs: kernel.to_vec() };
    let (batch, cin, h, w) = match input[..] {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(err()),
    };
    let (cout, kcin, kh, kw) = match kernel[..] {
        [o, i, kh, kw] => (o, i, kh, kw),
        _ => return Err(err()),
    };
    if kcin != cin {
        return Err(err());
    }
    let oh = geom.output_extent(h, kh).ok_or_else(err)?;
    let ow = geom.output_extent(w, kw).ok_or_else(err)?;
    Ok(ConvDims { batch, cin, h, w, cout, kh, kw, oh, ow })
}

/// Unfolds one image `[cin,h,w]` into columns `[cin*kh*kw, oh*ow]`.
fn im2col(img: &[f64], d: &ConvDims, geom: Conv2dGeometry, cols: &mut [f64]) {
    let spatial = d.oh * d.ow;
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oi in 0..d.oh {
                    let y = (oi * geom.stride + ki) as isize - geom.padding as isize;
                    for oj in 0..d.ow {
                        let x = (oj * geom.stride + kj) as isize - geom.padding as isize;
                        dst[oi * d.ow + oj] = if y >= 0 && x >= 0 && (y as usize) < d.h && (x as usize) < d.w {
                            img[(c * d.h + y as usize) * d.w + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatters columns back onto one image, summing overlaps.
fn col2im(cols: &[f64], d: &ConvDims, geom: Conv2dGeometry, img: &mut [f64]) {
    let spatial = d.oh * d.ow;
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oi in 0..d.oh {
                    let y = (oi * geom.stride + ki) as isize - geom.padding as isize;
                    if y < 0 || y as usize >= d.h {
                        continue;
                    }
                    for oj in 0..d.ow {
                        let x = (oj * geom.stride + kj) as isize - geom.padding as isize;
                        if x >= 0 && (x as usize) < d.w {
                            img[(c * d.h + y as usize) * d.w + x as usize] += src[oi * d.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(input: &Tensor, kernel: &Tensor, geom: Conv2dGeometry) -> Result<Tensor> {
    let d = conv_dims("conv2d", &input.shape, &kernel.shape, geom)?;
    let k = d.cin * d.kh * d.kw;
    let spatial = d.oh * d.ow;
    let mut cols = vec![0.0; k * spatial];
    let mut out = vec![0.0; d.batch * d.cout * spatial];
    let img_len = d.cin * d.h * d.w;
    for b in 0..d.batch {
        im2col(&input.data[b * img_len..(b + 1) * img_len], &d, geom, &mut cols);
        let dst = &mut out[b * d.cout * spatial..(b + 1) * d.cout * spatial];
        gemm(d.cout, k, spatial, &kernel.data, false, &cols, false, dst, false);
    }
    Ok(Tensor::from_parts(vec![d.batch, d.cout, d.oh, d.ow], out))
}

/// Gradient of a convolution with respect to its input, given the output
/// adjoint `grad` and the original `input_shape`.
pub(crate) fn conv2d_input_grad(
    grad: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    geom: Conv2dGeometry,
) -> Result<Tensor> {
    let d = conv_dims("conv2d_input_grad", input_shape, &kernel.shape, geom)?;
    if grad.shape != [d.batch, d.cout, d.oh, d.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: grad.shape.clone(),
            rhs: vec![d.batch, d.cout, d.oh, d.ow],
        });
    }
    let k = d.cin * d.kh * d.kw;
    let spatial = d.oh * d.ow;
    let img_len = d.cin * d.h * d.w;
    let mut cols = vec![0.0; k * spatial];
    let mut out = vec![0.0; d.batch * img_len];
    for b in 0..d.batch {
        let g = &grad.data[b * d.cout * spatial..(b + 1) * d.cout * spatial];
        gemm(k, d.cout, spatial, &kernel.data, true, g, false, &mut cols, false);
        col2im(&cols, &d, geom, &mut out[b * img_len..(b + 1) * img_len]);
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}

/// Gradient of a convolution with respect to its kernel.
pub(crate) fn conv2d_weight_grad(
    input: &Tensor,
    grad: &Tensor,
    kernel_shape: &[usize],
    geom: Conv2dGeometry,
) -> Result<Tensor> {
    let d = conv_dims("conv2d_weight_grad", &input.shape, kernel_shape, geom)?;
    if grad.shape != [d.batch, d.cout, d.oh, d.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_weight_grad",
            lhs: grad.shape.clone(),
            rhs: vec![d.batch, d.cout, d.oh, d.ow],
        });
    }
    let k = d.cin * d.kh * d.kw;
    let spatial = d.oh * d.ow;
    let img_len = d.cin * d.h * d.w;
    let mut cols = vec![0.0; k * spatial];
    let mut out = vec![0.0; d.cout * k];
    for b in 0..d.batch {
        im2col(&input.data[b * img_len..(b + 1) * img_len], &d, geom, &mut cols);
        let g = &grad.data[b * d.cout * spatial..(b + 1) * d.cout * spatial];
        gemm(d.cout, spatial, k, g, false, &cols, true, &mut out, true);
    }
    Ok(Tensor::from_parts(kernel_shape.to_vec(), out))
}

fn pool_dims(op: &'static str, shape: &[usize], k: usize) -> Result<(usize, usize, usize, usize)> {
    match shape[..] {
        [b, c, h, w] if k > 0 && h % k == 0 && w % k == 0 => Ok((b * c, h, w, k)),
        _ => Err(Error::ShapeMismatch { op, lhs: shape.to_vec(), rhs: vec![k, k] }),
    }
}

/// Non-overlapping `k x k` average pooling (stride `k`).
pub(crate) fn avg_pool(input: &Tensor, k: usize) -> Result<Tensor> {
    let (planes, h, w, k) = pool_dims("avg_pool", &input.shape, k)?;
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                dst[(y / k) * ow + x / k] += src[y * w + x];
            }
        }
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    let mut shape = input.shape.clone();
    shape[2] = oh;
    shape[3] = ow;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`avg_pool`]: spreads each pooled value evenly over its window.
pub(crate) fn avg_pool_grad(grad: &Tensor, k: usize, input_shape: &[usize]) -> Result<Tensor> {
    let (planes, h, w, k) = pool_dims("avg_pool_grad", input_shape, k)?;
    let (oh, ow) = (h / k, w / k);
    if numel(&grad.shape) != planes * oh * ow {
        return Err(Error::ShapeMismatch {
            op: "avg_pool_grad",
            lhs: grad.shape.clone(),
            rhs: input_shape.to_vec(),
        });
    }
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / k) * ow + x / k] * scale;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}
