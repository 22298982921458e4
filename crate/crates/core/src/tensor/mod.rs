//! Dense N-D tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: a shape plus a contiguous row-major
//! buffer behind an `Arc`, so cloning is cheap and values can be shared
//! read-only across threads. All computation is recorded on a [`Tape`]:
//! every operation appends a node holding the output value, the input node
//! ids and whatever context its backward rule needs. Nodes are appended in
//! execution order, so node ids are already a topological order and
//! [`Tape::backward`] is a single reverse sweep with additive gradient
//! accumulation across fan-out.
//!
//! Layout is N×C×D×H×W row-major for volumetric data (W fastest). The
//! element type is either `f32` (training) or `f64` (gradient checks and
//! statistics); it is fixed when a tensor is created.

mod element;
mod ops_conv;
mod ops_elem;
mod ops_linalg;
mod ops_loss;
mod ops_norm;
mod ops_shape;

pub mod gradcheck;

pub use element::Element;
pub use ops_conv::{conv_out_extent, ConvSpec};
pub use ops_norm::{Mode, RunningStats};

use std::sync::Arc;
use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid geometry: {detail}")]
    Geometry { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Index of a node on a [`Tape`].
pub type TensorId = usize;

/// Product of all extents.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    let mut acc = 1usize;
    for (i, &dim) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= dim;
    }
    strides
}

/// An immutable dense N-D value: shape plus shared row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    /// Build a tensor from a shape and matching buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DimensionMismatch {
                op: "from_vec",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        if shape.contains(&0) {
            return Err(TensorError::Geometry {
                op: "from_vec",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, data: Arc::new(vec![E::ZERO; n]) }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = numel(&shape);
        Self { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: E) -> Self {
        Self { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[E] {
        &self.data
    }

    /// Mutable access to the buffer; copies only if the buffer is shared.
    pub fn make_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same buffer reinterpreted under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.numel() {
            return Err(TensorError::DimensionMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    pub fn map_to_f64(&self) -> Tensor<f64> {
        Tensor::<f64> {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| v.to_f64()).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Saved per-channel statistics for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnSaved<E> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

/// Saved per-row statistics for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnSaved<E> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

/// One recorded operation: input ids plus whatever the backward rule needs.
#[derive(Debug, Clone)]
pub(crate) enum OpRecord<E: Element> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    /// `b` is broadcast (NumPy right-aligned) up to the shape of `a`.
    AddBcast { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: E },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Sigmoid { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Bmm { a: TensorId, b: TensorId, transpose_b: bool },
    Conv3d { x: TensorId, w: TensorId, b: TensorId, spec: ConvSpec },
    MaxPool3d { x: TensorId, argmax: Arc<Vec<u32>> },
    AvgPool3d { x: TensorId, window: (usize, usize, usize), stride: (usize, usize, usize) },
    GlobalAvgPool { x: TensorId },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: E,
        /// Present in train mode (batch statistics); eval mode stores the
        /// running statistics actually used so backward matches forward.
        saved: BnSaved<E>,
        train: bool,
    },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, saved: LnSaved<E> },
    Dropout { x: TensorId, mask: Arc<Vec<E>> },
    Reshape { a: TensorId },
    Permute { a: TensorId, perm: Vec<usize> },
    Narrow { a: TensorId, axis: usize, start: usize },
    Concat { inputs: Vec<TensorId>, axis: usize },
    Pad { a: TensorId, axis: usize, before: usize },
    Roll { a: TensorId, shifts: Vec<isize> },
    Gather { table: TensorId, indices: Arc<Vec<u32>> },
    MeanAxis { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    BceWithLogits { logits: TensorId, labels: Arc<Vec<E>> },
    MaeLoss { pred: TensorId, target: Arc<Vec<E>> },
}

#[derive(Debug)]
pub(crate) struct Node<E: Element> {
    pub value: Tensor<E>,
    pub requires_grad: bool,
    pub op: OpRecord<E>,
}

/// Records operations in execution order and replays them in reverse to
/// accumulate gradients. A tape is confined to one thread; create one per
/// forward pass and drop it afterwards to release intermediate buffers.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
    nan_sweep: bool,
}

/// `NEUROVOL_NAN_SWEEP=1` turns on a finite-value sweep after every forward op.
pub fn nan_sweep_from_env() -> bool {
    static FLAG: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *FLAG.get_or_init(|| {
        std::env::var("NEUROVOL_NAN_SWEEP").map(|v| v != "0" && !v.is_empty()).unwrap_or(false)
    })
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, nan_sweep: nan_sweep_from_env() }
    }

    /// A tape that computes forward values but records no backward rules.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, nan_sweep: nan_sweep_from_env() }
    }

    pub fn with_nan_sweep(mut self, on: bool) -> Self {
        self.nan_sweep = on;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input value. Only leaves with `requires_grad` set (and the
    /// nodes computed from them) participate in backward.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> TensorId {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, requires_grad: rg, op: OpRecord::Leaf });
        self.nodes.len() - 1
    }

    /// Register a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    pub(crate) fn data(&self, id: TensorId) -> &[E] {
        self.nodes[id].value.as_slice()
    }

    /// Append an op node. When grad is disabled the record is dropped so the
    /// tape holds values only.
    pub(crate) fn push_op(&mut self, value: Tensor<E>, op: OpRecord<E>, op_name: &'static str) -> Result<TensorId> {
        if self.nan_sweep && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let (op, requires_grad) = if self.grad_enabled {
            let rg = self.op_inputs_require_grad(&op);
            (if rg { op } else { OpRecord::Leaf }, rg)
        } else {
            (OpRecord::Leaf, false)
        };
        self.nodes.push(Node { value, requires_grad, op });
        Ok(self.nodes.len() - 1)
    }

    fn op_inputs_require_grad(&self, op: &OpRecord<E>) -> bool {
        let rg = |id: &TensorId| self.nodes[*id].requires_grad;
        match op {
            OpRecord::Leaf => false,
            OpRecord::Add { a, b } | OpRecord::AddBcast { a, b } | OpRecord::Mul { a, b } => rg(a) || rg(b),
            OpRecord::Scale { a, .. }
            | OpRecord::Relu { a }
            | OpRecord::Gelu { a }
            | OpRecord::Sigmoid { a }
            | OpRecord::Softmax { a, .. }
            | OpRecord::Reshape { a }
            | OpRecord::Permute { a, .. }
            | OpRecord::Narrow { a, .. }
            | OpRecord::Pad { a, .. }
            | OpRecord::Roll { a, .. }
            | OpRecord::MeanAxis { a, .. }
            | OpRecord::SumAll { a } => rg(a),
            OpRecord::Linear { x, w, b } => rg(x) || rg(w) || rg(b),
            OpRecord::Bmm { a, b, .. } => rg(a) || rg(b),
            OpRecord::Conv3d { x, w, b, .. } => rg(x) || rg(w) || rg(b),
            OpRecord::MaxPool3d { x, .. }
            | OpRecord::AvgPool3d { x, .. }
            | OpRecord::GlobalAvgPool { x }
            | OpRecord::Dropout { x, .. } => rg(x),
            OpRecord::BatchNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
            OpRecord::LayerNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
            OpRecord::Concat { inputs, .. } => inputs.iter().any(rg),
            OpRecord::Gather { table, .. } => rg(table),
            OpRecord::BceWithLogits { logits, .. } => rg(logits),
            OpRecord::MaeLoss { pred, .. } => rg(pred),
        }
    }

    /// Reverse sweep from a scalar loss. Every node is visited exactly once;
    /// gradients accumulate additively across fan-out. Intermediate gradient
    /// buffers are released as soon as their node has been processed; leaf
    /// gradients are kept and returned.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<E>> {
        if !self.grad_enabled {
            return Err(TensorError::Contract("backward on a no-grad tape".into()));
        }
        let loss_node = self.nodes.get(loss).ok_or_else(|| TensorError::Contract("loss id not on tape".into()))?;
        if loss_node.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        if loss_node.requires_grad {
            grads[loss] = Some(vec![E::ONE]);
        }
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let keep_leaf = matches!(self.nodes[id].op, OpRecord::Leaf);
            let grad = if keep_leaf {
                grads[id].clone().unwrap()
            } else {
                grads[id].take().unwrap()
            };
            self.backward_node(id, &grad, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Dispatch one node's backward rule, accumulating into input slots.
    fn backward_node(&self, id: TensorId, grad: &[E], grads: &mut [Option<Vec<E>>]) {
        macro_rules! acc {
            ($dst:expr, $produce:expr) => {{
                let dst: TensorId = $dst;
                if self.nodes[dst].requires_grad {
                    let slot = &mut grads[dst];
                    if slot.is_none() {
                        *slot = Some(vec![E::ZERO; self.nodes[dst].value.numel()]);
                    }
                    let buf = slot.as_mut().unwrap();
                    $produce(buf.as_mut_slice());
                }
            }};
        }
        let node = &self.nodes[id];
        match &node.op {
            OpRecord::Leaf => {}
            OpRecord::Add { a, b } => {
                acc!(*a, |buf: &mut [E]| ops_elem::acc_same(buf, grad));
                acc!(*b, |buf: &mut [E]| ops_elem::acc_same(buf, grad));
            }
            OpRecord::AddBcast { a, b } => {
                acc!(*a, |buf: &mut [E]| ops_elem::acc_same(buf, grad));
                acc!(*b, |buf: &mut [E]| {
                    ops_elem::acc_bcast_reduce(buf, grad, self.shape(*a), self.shape(*b))
                });
            }
            OpRecord::Mul { a, b } => {
                acc!(*a, |buf: &mut [E]| ops_elem::acc_mul(buf, grad, self.data(*b)));
                acc!(*b, |buf: &mut [E]| ops_elem::acc_mul(buf, grad, self.data(*a)));
            }
            OpRecord::Scale { a, c } => {
                acc!(*a, |buf: &mut [E]| ops_elem::acc_scaled(buf, grad, *c));
            }
            OpRecord::Relu { a } => {
                acc!(*a, |buf: &mut [E]| ops_elem::relu_backward(buf, grad, self.data(*a)));
            }
            OpRecord::Gelu { a } => {
                acc!(*a, |buf: &mut [E]| ops_elem::gelu_backward(buf, grad, self.data(*a)));
            }
            OpRecord::Sigmoid { a } => {
                acc!(*a, |buf: &mut [E]| ops_elem::sigmoid_backward(buf, grad, node.value.as_slice()));
            }
            OpRecord::Softmax { a, axis } => {
                acc!(*a, |buf: &mut [E]| {
                    ops_elem::softmax_backward(buf, grad, node.value.as_slice(), node.value.shape(), *axis)
                });
            }
            OpRecord::Linear { x, w, b } => {
                ops_linalg::linear_backward(self, grad, *x, *w, *b, grads);
            }
            OpRecord::Bmm { a, b, transpose_b } => {
                ops_linalg::bmm_backward(self, grad, *a, *b, *transpose_b, grads);
            }
            OpRecord::Conv3d { x, w, b, spec } => {
                ops_conv::conv3d_backward(self, grad, *x, *w, *b, spec, grads);
            }
            OpRecord::MaxPool3d { x, argmax } => {
                acc!(*x, |buf: &mut [E]| ops_conv::maxpool_backward(buf, grad, argmax));
            }
            OpRecord::AvgPool3d { x, window, stride } => {
                acc!(*x, |buf: &mut [E]| {
                    ops_conv::avgpool_backward(buf, grad, self.shape(*x), node.value.shape(), *window, *stride)
                });
            }
            OpRecord::GlobalAvgPool { x } => {
                acc!(*x, |buf: &mut [E]| ops_conv::global_avgpool_backward(buf, grad, self.shape(*x)));
            }
            OpRecord::BatchNorm { x, gamma, beta, eps, saved, train } => {
                ops_norm::batchnorm_backward(self, grad, *x, *gamma, *beta, *eps, saved, *train, grads);
            }
            OpRecord::LayerNorm { x, gamma, beta, saved } => {
                ops_norm::layernorm_backward(self, grad, *x, *gamma, *beta, saved, grads);
            }
            OpRecord::Dropout { x, mask } => {
                acc!(*x, |buf: &mut [E]| ops_elem::acc_mul(buf, grad, mask));
            }
            OpRecord::Reshape { a } => {
                acc!(*a, |buf: &mut [E]| ops_elem::acc_same(buf, grad));
            }
            OpRecord::Permute { a, perm } => {
                acc!(*a, |buf: &mut [E]| {
                    ops_shape::permute_backward(buf, grad, self.shape(*a), perm)
                });
            }
            OpRecord::Narrow { a, axis, start } => {
                acc!(*a, |buf: &mut [E]| {
                    ops_shape::narrow_backward(buf, grad, self.shape(*a), node.value.shape(), *axis, *start)
                });
            }
            OpRecord::Concat { inputs, axis } => {
                ops_shape::concat_backward(self, grad, inputs, *axis, node.value.shape(), grads);
            }
            OpRecord::Pad { a, axis, before } => {
                acc!(*a, |buf: &mut [E]| {
                    ops_shape::pad_backward(buf, grad, self.shape(*a), node.value.shape(), *axis, *before)
                });
            }
            OpRecord::Roll { a, shifts } => {
                acc!(*a, |buf: &mut [E]| ops_shape::roll_backward(buf, grad, self.shape(*a), shifts));
            }
            OpRecord::Gather { table, indices } => {
                acc!(*table, |buf: &mut [E]| {
                    ops_shape::gather_backward(buf, grad, self.shape(*table), indices)
                });
            }
            OpRecord::MeanAxis { a, axis } => {
                acc!(*a, |buf: &mut [E]| ops_elem::mean_axis_backward(buf, grad, self.shape(*a), *axis));
            }
            OpRecord::SumAll { a } => {
                acc!(*a, |buf: &mut [E]| {
                    let g = grad[0];
                    for v in buf.iter_mut() {
                        *v += g;
                    }
                });
            }
            OpRecord::BceWithLogits { logits, labels } => {
                acc!(*logits, |buf: &mut [E]| {
                    ops_loss::bce_backward(buf, grad[0], self.data(*logits), labels)
                });
            }
            OpRecord::MaeLoss { pred, target } => {
                acc!(*pred, |buf: &mut [E]| {
                    ops_loss::mae_backward(buf, grad[0], self.data(*pred), target)
                });
            }
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward sweep: per-node gradient buffers for everything that
/// required grad. Detached tensors yield `None`.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: TensorId) -> Option<&[E]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<E>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}
