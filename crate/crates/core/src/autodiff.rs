//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only record of operations. [`Graph::backward`]
//! runs the adjoint pass eagerly and leaves the graph untouched, while
//! [`Graph::grad`] records the adjoint pass *into* the graph so that the
//! resulting gradients are themselves differentiable. The second form is what
//! makes it possible to take an SGD step inside the graph and later
//! differentiate the post-update loss with respect to variables created before
//! the step.
//!
//! Every adjoint rule is written once, generically over [`Builder`], and is
//! expressed only in terms of ops that themselves have adjoint rules, so the
//! op set is closed under differentiation.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Conv2dGeometry, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Whether values recorded before [`Graph::end_step`] survive the call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetainPolicy {
    /// Keep every intermediate; required to differentiate through updates.
    Keep,
    /// Drop history at each step boundary; memory stays bounded by one step.
    Release,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    /// A value carried across a released step boundary; it has no history.
    Truncated,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Relu,
    Softmax,
    SoftmaxCrossEntropy(Arc<[usize]>),
    Conv2d(Conv2dGeometry),
    Conv2dInputGrad { geom: Conv2dGeometry, input_shape: Vec<usize> },
    Conv2dWeightGrad { geom: Conv2dGeometry, kernel_shape: Vec<usize> },
    AvgPool(usize),
    AvgPoolGrad { kernel: usize, input_shape: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Truncated => "truncated",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::SumTo(_) => "sum_to",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Op::Conv2d(_) => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::AvgPool(_) => "avg_pool",
            Op::AvgPoolGrad { .. } => "avg_pool_grad",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf | Op::Constant | Op::Truncated => 0,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::MatMul
            | Op::Conv2d(_)
            | Op::Conv2dInputGrad { .. }
            | Op::Conv2dWeightGrad { .. } => 2,
            _ => 1,
        }
    }

    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let out = match self {
            Op::Leaf | Op::Constant | Op::Truncated => unreachable!("sources carry their own value"),
            Op::Add => tensor::add(x[0], x[1])?,
            Op::Sub => tensor::sub(x[0], x[1])?,
            Op::Mul => tensor::mul(x[0], x[1])?,
            Op::Scale(s) => x[0].map(|v| v * s),
            Op::MatMul => tensor::matmul(x[0], x[1])?,
            Op::Transpose => tensor::transpose(x[0])?,
            Op::Reshape(shape) => x[0].reshaped(shape)?,
            Op::BroadcastTo(shape) => tensor::broadcast_to(x[0], shape)?,
            Op::SumTo(shape) => tensor::sum_to(x[0], shape)?,
            Op::Relu => x[0].map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::Softmax => tensor::softmax_rows(x[0])?,
            Op::SoftmaxCrossEntropy(labels) => tensor::softmax_cross_entropy(x[0], labels)?,
            Op::Conv2d(geom) => tensor::conv2d(x[0], x[1], *geom)?,
            Op::Conv2dInputGrad { geom, input_shape } => {
                tensor::conv2d_input_grad(x[0], x[1], input_shape, *geom)?
            }
            Op::Conv2dWeightGrad { geom, kernel_shape } => {
                tensor::conv2d_weight_grad(x[0], x[1], kernel_shape, *geom)?
            }
            Op::AvgPool(k) => tensor::avg_pool(x[0], *k)?,
            Op::AvgPoolGrad { kernel, input_shape } => {
                tensor::avg_pool_grad(x[0], *kernel, input_shape)?
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { op: self.name() });
        }
        Ok(out)
    }
}

#[cfg(feature = "fault-injection")]
static ADJOINT_FAULT: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

/// Deliberately corrupts the `mul` adjoint (scales one side by 1.5) so that
/// gradient checks can be shown to fail. Process-wide.
#[cfg(feature = "fault-injection")]
pub fn set_adjoint_fault(enabled: bool) {
    ADJOINT_FAULT.store(enabled, std::sync::atomic::Ordering::SeqCst);
}

fn adjoint_fault() -> bool {
    #[cfg(feature = "fault-injection")]
    {
        ADJOINT_FAULT.load(std::sync::atomic::Ordering::SeqCst)
    }
    #[cfg(not(feature = "fault-injection"))]
    {
        false
    }
}

/// Target of the adjoint rules: either eager tensors or new graph nodes.
pub(crate) trait Builder {
    type H: Clone;
    fn lift(&self, id: usize) -> Result<Self::H>;
    fn value<'a>(&'a self, h: &'a Self::H) -> &'a Tensor;
    fn constant(&mut self, t: Tensor) -> Self::H;
    fn apply(&mut self, op: Op, inputs: &[Self::H]) -> Result<Self::H>;
}

/// Per-input adjoint contributions of one node; `None` where not `needed`.
fn adjoint<B: Builder>(
    b: &mut B,
    op: &Op,
    ins: &[B::H],
    out: &B::H,
    g: &B::H,
    needed: &[bool],
) -> Result<Vec<Option<B::H>>> {
    let shape_of = |b: &B, h: &B::H| b.value(h).shape().to_vec();
    let mut res: Vec<Option<B::H>> = vec![None; ins.len()];
    match op {
        Op::Leaf | Op::Constant => {}
        Op::Truncated => unreachable!("checked before the adjoint pass"),
        Op::Add => {
            res[0] = Some(g.clone());
            res[1] = Some(g.clone());
        }
        Op::Sub => {
            res[0] = Some(g.clone());
            if needed[1] {
                res[1] = Some(b.apply(Op::Scale(-1.0), std::slice::from_ref(g))?);
            }
        }
        Op::Mul => {
            if needed[0] {
                let mut ga = b.apply(Op::Mul, &[g.clone(), ins[1].clone()])?;
                if adjoint_fault() {
                    ga = b.apply(Op::Scale(1.5), &[ga])?;
                }
                res[0] = Some(ga);
            }
            if needed[1] {
                res[1] = Some(b.apply(Op::Mul, &[g.clone(), ins[0].clone()])?);
            }
        }
        Op::Scale(s) => res[0] = Some(b.apply(Op::Scale(*s), std::slice::from_ref(g))?),
        Op::MatMul => {
            if needed[0] {
                let bt = b.apply(Op::Transpose, &[ins[1].clone()])?;
                res[0] = Some(b.apply(Op::MatMul, &[g.clone(), bt])?);
            }
            if needed[1] {
                let at = b.apply(Op::Transpose, &[ins[0].clone()])?;
                res[1] = Some(b.apply(Op::MatMul, &[at, g.clone()])?);
            }
        }
        Op::Transpose => res[0] = Some(b.apply(Op::Transpose, std::slice::from_ref(g))?),
        Op::Reshape(_) => {
            let shape = shape_of(b, &ins[0]);
            res[0] = Some(b.apply(Op::Reshape(shape), std::slice::from_ref(g))?);
        }
        Op::BroadcastTo(_) => {
            let shape = shape_of(b, &ins[0]);
            res[0] = Some(b.apply(Op::SumTo(shape), std::slice::from_ref(g))?);
        }
        Op::SumTo(_) => {
            let shape = shape_of(b, &ins[0]);
            res[0] = Some(b.apply(Op::BroadcastTo(shape), std::slice::from_ref(g))?);
        }
        Op::Relu => {
            // The step function has zero derivative almost everywhere, so it
            // enters higher-order passes as a constant.
            let step = b.value(&ins[0]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let step = b.constant(step);
            res[0] = Some(b.apply(Op::Mul, &[g.clone(), step])?);
        }
        Op::Softmax => {
            // J^T v = s * (v - rowsum(v * s))
            let shape = shape_of(b, out);
            let vs = b.apply(Op::Mul, &[g.clone(), out.clone()])?;
            let rows = b.apply(Op::SumTo(vec![shape[0], 1]), &[vs])?;
            let rows = b.apply(Op::BroadcastTo(shape), &[rows])?;
            let centred = b.apply(Op::Sub, &[g.clone(), rows])?;
            res[0] = Some(b.apply(Op::Mul, &[out.clone(), centred])?);
        }
        Op::SoftmaxCrossEntropy(labels) => {
            let shape = shape_of(b, &ins[0]);
            let probs = b.apply(Op::Softmax, &[ins[0].clone()])?;
            let target = b.constant(tensor::one_hot(labels, shape[1]));
            let diff = b.apply(Op::Sub, &[probs, target])?;
            let gb = b.apply(Op::BroadcastTo(shape.clone()), std::slice::from_ref(g))?;
            let scaled = b.apply(Op::Mul, &[gb, diff])?;
            res[0] = Some(b.apply(Op::Scale(1.0 / shape[0] as f64), &[scaled])?);
        }
        Op::Conv2d(geom) => {
            if needed[0] {
                let input_shape = shape_of(b, &ins[0]);
                res[0] = Some(b.apply(
                    Op::Conv2dInputGrad { geom: *geom, input_shape },
                    &[g.clone(), ins[1].clone()],
                )?);
            }
            if needed[1] {
                let kernel_shape = shape_of(b, &ins[1]);
                res[1] = Some(b.apply(
                    Op::Conv2dWeightGrad { geom: *geom, kernel_shape },
                    &[ins[0].clone(), g.clone()],
                )?);
            }
        }
        // inputs: [output adjoint, kernel]
        Op::Conv2dInputGrad { geom, .. } => {
            if needed[0] {
                res[0] = Some(b.apply(Op::Conv2d(*geom), &[g.clone(), ins[1].clone()])?);
            }
            if needed[1] {
                let kernel_shape = shape_of(b, &ins[1]);
                res[1] = Some(b.apply(
                    Op::Conv2dWeightGrad { geom: *geom, kernel_shape },
                    &[g.clone(), ins[0].clone()],
                )?);
            }
        }
        // inputs: [activation, output adjoint]
        Op::Conv2dWeightGrad { geom, .. } => {
            if needed[0] {
                let input_shape = shape_of(b, &ins[0]);
                res[0] = Some(b.apply(
                    Op::Conv2dInputGrad { geom: *geom, input_shape },
                    &[ins[1].clone(), g.clone()],
                )?);
            }
            if needed[1] {
                res[1] = Some(b.apply(Op::Conv2d(*geom), &[ins[0].clone(), g.clone()])?);
            }
        }
        Op::AvgPool(kernel) => {
            let input_shape = shape_of(b, &ins[0]);
            res[0] = Some(b.apply(Op::AvgPoolGrad { kernel: *kernel, input_shape }, std::slice::from_ref(g))?);
        }
        Op::AvgPoolGrad { kernel, .. } => res[0] = Some(b.apply(Op::AvgPool(*kernel), std::slice::from_ref(g))?),
    }
    for (r, &n) in res.iter_mut().zip(needed) {
        if !n {
            *r = None;
        }
    }
    Ok(res)
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Option<Arc<Tensor>>,
    requires_grad: bool,
    name: Option<String>,
}

/// Append-only operation record. Nodes are topologically ordered by id.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    policy: RetainPolicy,
    /// Ids below this were dropped by [`Graph::end_step`].
    released_before: usize,
}

/// Gradients of a scalar with respect to requested variables.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    entries: Vec<(Var, String, Tensor)>,
}

impl GradientMap {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.entries.iter().find(|(v, _, _)| *v == var).map(|(_, _, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &str, &Tensor)> {
        self.entries.iter().map(|(v, n, t)| (*v, n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gradients in request order.
    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, _, t)| t).collect()
    }

    pub fn from_named(entries: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self {
            entries: entries.into_iter().enumerate().map(|(i, (n, t))| (Var(i), n, t)).collect(),
        }
    }
}

/// L2 norm of every gradient, keyed and ordered by variable name.
pub fn grad_magnitude_report(grads: &GradientMap) -> BTreeMap<String, f64> {
    grads.iter().map(|(_, name, t)| (name.to_string(), t.l2_norm())).collect()
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(RetainPolicy::Keep)
    }
}

impl Graph {
    pub fn new(policy: RetainPolicy) -> Self {
        Self { nodes: Vec::new(), policy, released_before: 0 }
    }

    pub fn retain_policy(&self) -> RetainPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value: Some(value), requires_grad, name: None });
        Var(id)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, vec![], Arc::new(value), requires_grad)
    }

    pub fn named_leaf(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, vec![], Arc::new(value), false)
    }

    pub fn shared_constant(&mut self, value: Arc<Tensor>) -> Var {
        self.push(Op::Constant, vec![], value, false)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVariable(v.0))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.node(v)?.value.as_deref().ok_or(Error::GraphTruncated { node: v.0 })
    }

    pub fn name(&self, v: Var) -> Option<&str> {
        self.nodes.get(v.0).and_then(|n| n.name.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| n.requires_grad)
    }

    fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(op.arity(), inputs.len());
        let mut vals = Vec::with_capacity(inputs.len());
        for &i in inputs {
            vals.push(self.value(i)?);
        }
        let value = op.forward(&vals)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, inputs.iter().map(|v| v.0).collect(), Arc::new(value), requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(shape.to_vec()), &[a])
    }

    /// Numpy-style broadcast, aligning trailing axes.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::BroadcastTo(shape.to_vec()), &[a])
    }

    /// Sums away the axes that [`Graph::broadcast_to`] would expand.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::SumTo(shape.to_vec()), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax, &[a])
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits; a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.record(Op::SoftmaxCrossEntropy(labels.into()), &[logits])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, geom: Conv2dGeometry) -> Result<Var> {
        self.record(Op::Conv2d(geom), &[input, kernel])
    }

    pub fn avg_pool(&mut self, input: Var, kernel: usize) -> Result<Var> {
        self.record(Op::AvgPool(kernel), &[input])
    }

    /// Marks the end of an optimizer step. Under [`RetainPolicy::Keep`] this is
    /// a no-op. Under [`RetainPolicy::Release`] every recorded value is dropped
    /// and each `carry` variable is re-issued as a history-free node; the
    /// returned handles replace the old ones.
    pub fn end_step(&mut self, carry: &[Var]) -> Result<Vec<Var>> {
        if self.policy == RetainPolicy::Keep {
            return Ok(carry.to_vec());
        }
        let values = carry
            .iter()
            .map(|&v| self.node(v)?.value.clone().ok_or(Error::GraphTruncated { node: v.0 }))
            .collect::<Result<Vec<_>>>()?;
        let boundary = self.nodes.len();
        for node in &mut self.nodes[self.released_before..] {
            node.value = None;
        }
        self.released_before = boundary;
        let out = carry
            .iter()
            .zip(values)
            .map(|(&old, value)| {
                let requires_grad = self.nodes[old.0].requires_grad;
                let name = self.nodes[old.0].name.clone();
                let v = self.push(Op::Truncated, vec![], value, requires_grad);
                self.nodes[v.0].name = name;
                v
            })
            .collect();
        Ok(out)
    }

    fn check_request(&self, loss: Var, wrt: &[Var]) -> Result<()> {
        let loss_node = self.node(loss)?;
        let shape = loss_node.value.as_ref().ok_or(Error::GraphTruncated { node: loss.0 })?.shape();
        if tensor::numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        for &w in wrt {
            let node = self.node(w)?;
            if w.0 < self.released_before {
                return Err(Error::GraphTruncated { node: self.released_before });
            }
            let is_source = matches!(node.op, Op::Leaf | Op::Constant | Op::Truncated);
            if is_source && !node.requires_grad {
                return Err(Error::NoGradient(w.0));
            }
        }
        Ok(())
    }

    /// Eager reverse-mode gradient of scalar `loss` with respect to `wrt`.
    /// The graph is not modified, so the call can be repeated.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<GradientMap> {
        self.check_request(loss, wrt)?;
        let mut eager = Eager { graph: self };
        let grads = run_backward(&mut eager, self, loss, wrt)?;
        let entries = wrt
            .iter()
            .zip(grads)
            .map(|(&w, g)| {
                let name = self.name(w).map_or_else(|| format!("var{}", w.0), str::to_string);
                let t = match g {
                    Some(t) => Arc::unwrap_or_clone(t),
                    None => Tensor::zeros(self.nodes[w.0].value.as_ref().expect("checked").shape()),
                };
                (w, name, t)
            })
            .collect();
        Ok(GradientMap { entries })
    }

    /// Differentiable gradient: records the adjoint pass into this graph and
    /// returns one gradient node per entry of `wrt`.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check_request(loss, wrt)?;
        let structure = Structure::of(self);
        let grads = run_backward(self, &structure, loss, wrt)?;
        wrt.iter()
            .zip(grads)
            .map(|(&w, g)| match g {
                Some(v) => Ok(v),
                None => {
                    let zeros = Tensor::zeros(self.value(w)?.shape());
                    Ok(self.constant(zeros))
                }
            })
            .collect()
    }
}

/// Read-only view of graph topology, independent of the builder.
trait Topology {
    fn op(&self, id: usize) -> &Op;
    fn inputs(&self, id: usize) -> &[usize];
    fn requires_grad(&self, id: usize) -> bool;
}

impl Topology for Graph {
    fn op(&self, id: usize) -> &Op {
        &self.nodes[id].op
    }
    fn inputs(&self, id: usize) -> &[usize] {
        &self.nodes[id].inputs
    }
    fn requires_grad(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }
}

/// Snapshot of topology, taken so the graph itself can be extended while
/// the adjoint pass walks the original nodes.
struct Structure {
    ops: Vec<Op>,
    inputs: Vec<Vec<usize>>,
    requires_grad: Vec<bool>,
}

impl Structure {
    fn of(g: &Graph) -> Self {
        Self {
            ops: g.nodes.iter().map(|n| n.op.clone()).collect(),
            inputs: g.nodes.iter().map(|n| n.inputs.clone()).collect(),
            requires_grad: g.nodes.iter().map(|n| n.requires_grad).collect(),
        }
    }
}

impl Topology for Structure {
    fn op(&self, id: usize) -> &Op {
        &self.ops[id]
    }
    fn inputs(&self, id: usize) -> &[usize] {
        &self.inputs[id]
    }
    fn requires_grad(&self, id: usize) -> bool {
        self.requires_grad[id]
    }
}

fn run_backward<B: Builder, T: Topology>(
    b: &mut B,
    topo: &T,
    loss: Var,
    wrt: &[Var],
) -> Result<Vec<Option<B::H>>> {
    if wrt.is_empty() {
        return Ok(vec![]);
    }
    let lo = wrt.iter().map(|v| v.0).min().expect("non-empty");
    let hi = loss.0;
    if lo > hi {
        return Ok(vec![None; wrt.len()]);
    }
    let span = hi - lo + 1;
    let mut is_target = vec![false; span];
    for w in wrt {
        if w.0 <= hi {
            is_target[w.0 - lo] = true;
        }
    }
    // Nodes that depend on a requested variable...
    let mut active = vec![false; span];
    for id in lo..=hi {
        active[id - lo] = is_target[id - lo]
            || (topo.requires_grad(id)
                && topo.inputs(id).iter().any(|&i| i >= lo && active[i - lo]));
    }
    // ...and that the loss depends on.
    let mut live = vec![false; span];
    live[span - 1] = true;
    for id in (lo..=hi).rev() {
        if live[id - lo] && active[id - lo] {
            for &i in topo.inputs(id) {
                if i >= lo {
                    live[i - lo] = true;
                }
            }
        }
    }

    let mut adj: Vec<Option<B::H>> = vec![None; span];
    if active[span - 1] {
        let seed = Tensor::ones(b.value(&b.lift(hi)?).shape());
        adj[span - 1] = Some(b.constant(seed));
    }
    let mut results: Vec<Option<B::H>> = vec![None; span];
    for id in (lo..=hi).rev() {
        let k = id - lo;
        if !(active[k] && live[k]) {
            continue;
        }
        let Some(g) = adj[k].take() else { continue };
        if is_target[k] {
            results[k] = Some(g.clone());
        }
        let op = topo.op(id);
        if matches!(op, Op::Truncated) {
            if !is_target[k] {
                return Err(Error::GraphTruncated { node: id });
            }
            continue;
        }
        let inputs = topo.inputs(id);
        let needed: Vec<bool> = inputs
            .iter()
            .map(|&i| i >= lo && active[i - lo] && live[i - lo])
            .collect();
        if !needed.iter().any(|&n| n) {
            continue;
        }
        let ins = inputs.iter().map(|&i| b.lift(i)).collect::<Result<Vec<_>>>()?;
        let out = b.lift(id)?;
        let contribs = adjoint(b, op, &ins, &out, &g, &needed)?;
        for (&i, c) in inputs.iter().zip(contribs) {
            let Some(c) = c else { continue };
            let slot = &mut adj[i - lo];
            *slot = Some(match slot.take() {
                Some(prev) => b.apply(Op::Add, &[prev, c])?,
                None => c,
            });
        }
    }
    Ok(wrt.iter().map(|w| if w.0 <= hi { results[w.0 - lo].clone() } else { None }).collect())
}

struct Eager<'g> {
    graph: &'g Graph,
}

impl Builder for Eager<'_> {
    type H = Arc<Tensor>;

    fn lift(&self, id: usize) -> Result<Arc<Tensor>> {
        self.graph.nodes[id].value.clone().ok_or(Error::GraphTruncated { node: id })
    }

    fn value<'a>(&'a self, h: &'a Arc<Tensor>) -> &'a Tensor {
        h
    }

    fn constant(&mut self, t: Tensor) -> Arc<Tensor> {
        Arc::new(t)
    }

    fn apply(&mut self, op: Op, inputs: &[Arc<Tensor>]) -> Result<Arc<Tensor>> {
        let vals: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
        op.forward(&vals).map(Arc::new)
    }
}

impl Builder for Graph {
    type H = Var;

    fn lift(&self, id: usize) -> Result<Var> {
        match self.nodes[id].value {
            Some(_) => Ok(Var(id)),
            None => Err(Error::GraphTruncated { node: id }),
        }
    }

    fn value<'a>(&'a self, h: &'a Var) -> &'a Tensor {
        self.nodes[h.0].value.as_deref().expect("lifted nodes hold values")
    }

    fn constant(&mut self, t: Tensor) -> Var {
        Graph::constant(self, t)
    }

    fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        self.record(op, inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::default();
        let a = g.constant(vec(&[1.0, 2.0]));
        let b = g.constant(vec(&[3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).unwrap().data(), &[3.0, 8.0]);
        let x = g.constant(vec(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::default();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut g = Graph::default();
        let a = g.constant(vec(&[1e300]));
        let b = g.constant(vec(&[1e300]));
        let err = g.mul(a, b).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn square_of_scaled_leaf() {
        let mut g = Graph::default();
        let c = g.leaf(Tensor::scalar(1.0), true);
        let three_c = g.scale(c, 3.0).unwrap();
        let sq = g.mul(three_c, three_c).unwrap();
        let grads = g.backward(sq, &[c]).unwrap();
        assert_eq!(grads.get(c).unwrap().item(), 18.0);
    }

    #[test]
    fn backward_leaves_graph_unchanged_and_is_repeatable() {
        let mut g = Graph::default();
        let c = g.leaf(vec(&[0.5, -1.5]), true);
        let s = g.mul(c, c).unwrap();
        let l = g.sum_to(s, &[]).unwrap();
        let n = g.len();
        let first = g.backward(l, &[c]).unwrap();
        let second = g.backward(l, &[c]).unwrap();
        assert_eq!(g.len(), n);
        assert_eq!(first.get(c).unwrap(), second.get(c).unwrap());
        assert_eq!(first.get(c).unwrap().data(), &[1.0, -3.0]);
    }

    #[test]
    fn rejects_non_scalar_loss_and_frozen_leaf() {
        let mut g = Graph::default();
        let c = g.leaf(vec(&[1.0, 2.0]), true);
        let frozen = g.leaf(vec(&[1.0, 2.0]), false);
        let p = g.mul(c, frozen).unwrap();
        assert!(matches!(g.backward(p, &[c]), Err(Error::NonScalarLoss(_))));
        let l = g.sum_to(p, &[]).unwrap();
        assert!(matches!(g.backward(l, &[frozen]), Err(Error::NoGradient(_))));
    }

    #[test]
    fn differentiable_grad_gives_second_derivative() {
        // f(x) = x^3 -> f'' = 6x
        let mut g = Graph::default();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let dx = g.grad(x3, &[x]).unwrap()[0];
        assert_eq!(g.value(dx).unwrap().item(), 12.0);
        let d2 = g.backward(dx, &[x]).unwrap();
        assert_eq!(d2.get(x).unwrap().item(), 12.0);
    }

    #[test]
    fn release_policy_blocks_unrolled_differentiation() {
        for policy in [RetainPolicy::Keep, RetainPolicy::Release] {
            let mut g = Graph::new(policy);
            let c = g.leaf(Tensor::scalar(1.0), true);
            let w = g.scale(c, 2.0).unwrap();
            let carried = g.end_step(&[w]).unwrap();
            let l = g.mul(carried[0], carried[0]).unwrap();
            let res = g.backward(l, &[c]);
            match policy {
                RetainPolicy::Keep => assert_eq!(res.unwrap().get(c).unwrap().item(), 8.0),
                RetainPolicy::Release => {
                    let err = res.unwrap_err();
                    assert!(matches!(err, Error::GraphTruncated { .. }));
                    assert!(err.to_string().contains("RetainPolicy::Keep"));
                }
            }
            // the carried value itself stays differentiable
            assert_eq!(g.backward(l, &[carried[0]]).unwrap().into_tensors()[0].item(), 4.0);
        }
    }

    #[test]
    fn magnitude_report_examples() {
        let map = GradientMap::from_named([
            ("b".to_string(), vec(&[0.0, 0.0])),
            ("a".to_string(), vec(&[3.0, 4.0])),
        ]);
        let report = grad_magnitude_report(&map);
        let rows: Vec<_> = report.into_iter().collect();
        assert_eq!(rows, vec![("a".to_string(), 5.0), ("b".to_string(), 0.0)]);
    }
}
