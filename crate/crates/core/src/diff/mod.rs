//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive operation of a forward pass in
//! topological order; [`backward`] replays it once in reverse, accumulating
//! gradients into each recorded [`Var`]. Tapes are confined to one thread;
//! detached [`Tensor`] snapshots move freely between threads.

mod gradcheck;
mod kernels;
mod ops;

pub use gradcheck::grad_check;
pub use kernels::conv2d_output_dims;
pub use ops::BnRunning;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Softplus,
    SmoothL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Min,
}

/// Saved batch-norm forward context: per-channel statistics actually used
/// for normalization, so the backward pass can rebuild normalized values.
#[derive(Clone, Debug)]
pub(crate) struct BnCtx<E: Scalar> {
    pub mean: Vec<E>,
    pub invstd: Vec<E>,
    pub train: bool,
}

pub(crate) enum Op<E: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    SubScalar(usize),
    MulScalar(usize, E),
    DivScalar(usize, E),
    PowScalar { x: usize, exponent: f64 },
    Unary { x: usize, kind: UnaryKind },
    Linear { x: usize, w: usize, b: usize },
    /// Broadcast add of a per-channel bias over axis 1.
    AddBias { x: usize, b: usize },
    Conv2d { x: usize, w: usize, stride: usize, padding: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    UpsampleNearest { x: usize, factor: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, ctx: BnCtx<E> },
    ConcatC { a: usize, b: usize },
    Reduce { x: usize, kind: ReduceKind, axes: Vec<usize>, argmin: Option<Vec<usize>> },
    Softmax { x: usize },
    CrossEntropy { x: usize, labels: Vec<usize> },
    Slice0 { x: usize, index: usize },
    Reshape { x: usize },
}

pub(crate) struct Node<E: Scalar> {
    pub value: Tensor<E>,
    pub op: Op<E>,
    pub requires_grad: bool,
}

pub(crate) struct TapeInner<E: Scalar> {
    pub nodes: Vec<Node<E>>,
    /// Persistent per-node gradients; `None` means all-zero.
    pub grads: Vec<Option<Tensor<E>>>,
}

/// Operation record for one forward/backward pass. Cheap to clone (shared).
pub struct Tape<E: Scalar> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape, together with its gradient slot.
pub struct Var<E: Scalar> {
    tape: Tape<E>,
    id: usize,
}

impl<E: Scalar> Clone for Var<E> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    /// Record an input value. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<E> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<E>) -> Var<E> {
        self.leaf(value, false)
    }

    pub fn scalar_const(&self, value: E) -> Var<E> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every recorded node and gradient.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.grads.clear();
    }

    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grads.iter_mut() {
            *g = None;
        }
    }

    pub fn same_tape(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var<E> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    pub(crate) fn with_inner<R>(&self, f: impl FnOnce(&TapeInner<E>) -> R) -> R {
        f(&self.inner.borrow())
    }

    /// Accumulate d(root)/d(v) into every recorded variable's gradient.
    ///
    /// The seed is propagated through fresh local buffers, so calling this
    /// twice without zeroing doubles every gradient exactly. The tape itself
    /// is left intact; call [`Tape::reset`] to reuse it.
    pub fn backward(&self, root: &Var<E>) -> Result<()> {
        if !self.same_tape(&root.tape) {
            return Err(Error::invalid("backward root belongs to a different tape"));
        }
        let inner = &mut *self.inner.borrow_mut();
        let TapeInner { nodes, grads } = inner;
        if root.id >= nodes.len() {
            return Err(Error::invalid("backward root is not on the tape"));
        }
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }

        let n = nodes.len();
        let mut local: Vec<Option<Tensor<E>>> = Vec::with_capacity(n);
        local.resize_with(n, || None);
        local[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), E::one()));

        for i in (0..n).rev() {
            let Some(gout) = local[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            propagate(nodes, &mut local, i, &gout);
            match &mut grads[i] {
                Some(acc) => {
                    for (a, g) in acc.data_mut().iter_mut().zip(gout.data()) {
                        *a += *g;
                    }
                }
                slot => *slot = Some(gout),
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward<E: Scalar>(root: &Var<E>) -> Result<()> {
    root.tape.backward(root)
}

impl<E: Scalar> Var<E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<E> {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape
            .with_inner(|inner| inner.nodes[self.id].value.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_inner(|inner| inner.nodes[self.id].value.numel())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_inner(|inner| inner.nodes[self.id].requires_grad)
    }

    /// Snapshot of the forward value.
    pub fn value(&self) -> Tensor<E> {
        self.tape.with_inner(|inner| inner.nodes[self.id].value.clone())
    }

    pub fn item_f64(&self) -> Result<f64> {
        Ok(self.value().item()?.to_f64())
    }

    /// Snapshot of the accumulated gradient (zeros if backward never reached
    /// this variable).
    pub fn grad(&self) -> Tensor<E> {
        self.tape.with_inner(|inner| match &inner.grads[self.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(inner.nodes[self.id].value.shape()),
        })
    }

    pub fn zero_grad(&self) {
        let mut inner = self.tape.inner.borrow_mut();
        inner.grads[self.id] = None;
    }

    pub(crate) fn same_tape(&self, other: &Var<E>) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("variables must live on the same tape"))
        }
    }
}

fn acc_slot<'a, E: Scalar>(
    local: &'a mut [Option<Tensor<E>>],
    idx: usize,
    shape: &[usize],
) -> &'a mut [E] {
    local[idx]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

/// Push `gout` through one recorded operation into its inputs' local buffers.
fn propagate<E: Scalar>(
    nodes: &[Node<E>],
    local: &mut [Option<Tensor<E>>],
    i: usize,
    gout: &Tensor<E>,
) {
    let g = gout.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if nodes[*a].requires_grad {
                let ga = acc_slot(local, *a, nodes[*a].value.shape());
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if nodes[*b].requires_grad {
                let gb = acc_slot(local, *b, nodes[*b].value.shape());
                for (d, &gv) in gb.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Sub(a, b) => {
            if nodes[*a].requires_grad {
                let ga = acc_slot(local, *a, nodes[*a].value.shape());
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if nodes[*b].requires_grad {
                let gb = acc_slot(local, *b, nodes[*b].value.shape());
                for (d, &gv) in gb.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let bv = nodes[*b].value.data();
                let ga = acc_slot(local, *a, nodes[*a].value.shape());
                for k in 0..g.len() {
                    ga[k] += g[k] * bv[k];
                }
            }
            if nodes[*b].requires_grad {
                let av = nodes[*a].value.data();
                let gb = acc_slot(local, *b, nodes[*b].value.shape());
                for k in 0..g.len() {
                    gb[k] += g[k] * av[k];
                }
            }
        }
        Op::Div(a, b) => {
            let bv = nodes[*b].value.data();
            if nodes[*a].requires_grad {
                let ga = acc_slot(local, *a, nodes[*a].value.shape());
                for k in 0..g.len() {
                    ga[k] += g[k] / bv[k];
                }
            }
            if nodes[*b].requires_grad {
                let av = nodes[*a].value.data();
                let gb = acc_slot(local, *b, nodes[*b].value.shape());
                for k in 0..g.len() {
                    gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                }
            }
        }
        Op::AddScalar(x) | Op::SubScalar(x) => {
            if nodes[*x].requires_grad {
                let gx = acc_slot(local, *x, nodes[*x].value.shape());
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::MulScalar(x, c) => {
            if nodes[*x].requires_grad {
                let c = *c;
                let gx = acc_slot(local, *x, nodes[*x].value.shape());
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
        }
        Op::DivScalar(x, c) => {
            if nodes[*x].requires_grad {
                let c = *c;
                let gx = acc_slot(local, *x, nodes[*x].value.shape());
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d += gv / c;
                }
            }
        }
        Op::PowScalar { x, exponent } => {
            if nodes[*x].requires_grad {
                let k = E::from_f64(*exponent);
                let xv = nodes[*x].value.data();
                let expm1 = E::from_f64(*exponent - 1.0);
                let gx = acc_slot(local, *x, nodes[*x].value.shape());
                for j in 0..g.len() {
                    gx[j] += g[j] * k * xv[j].powf(expm1);
                }
            }
        }
        Op::Unary { x, kind } => {
            if nodes[*x].requires_grad {
                let xv = nodes[*x].value.data();
                let yv = nodes[i].value.data();
                let gx = acc_slot(local, *x, nodes[*x].value.shape());
                match kind {
                    UnaryKind::Relu => {
                        for j in 0..g.len() {
                            if xv[j] > E::zero() {
                                gx[j] += g[j];
                            }
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for j in 0..g.len() {
                            gx[j] += g[j] * yv[j] * (E::one() - yv[j]);
                        }
                    }
                    UnaryKind::Softplus => {
                        for j in 0..g.len() {
                            gx[j] += g[j] * kernels::sigmoid(xv[j]);
                        }
                    }
                    UnaryKind::SmoothL1 => {
                        for j in 0..g.len() {
                            let x = xv[j];
                            let d = if x.abs() < E::one() {
                                x
                            } else if x > E::zero() {
                                E::one()
                            } else {
                                -E::one()
                            };
                            gx[j] += g[j] * d;
                        }
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (n_rows, f_in) = {
                let s = nodes[*x].value.shape();
                (s[0], s[1])
            };
            let f_out = nodes[*w].value.shape()[1];
            if nodes[*x].requires_grad {
                let wv = nodes[*w].value.data();
                let gx = acc_slot(local, *x, nodes[*x].value.shape());
                kernels::linear_backward_data(g, wv, n_rows, f_in, f_out, gx);
            }
            if nodes[*w].requires_grad {
                let xv = nodes[*x].value.data();
                let gw = acc_slot(local, *w, nodes[*w].value.shape());
                kernels::linear_backward_weight(g, xv, n_rows, f_in, f_out, gw);
            }
            if nodes[*b].requires_grad {
                let gb = acc_slot(local, *b, nodes[*b].value.shape());
                for r in 0..n_rows {
                    for c in 0..f_out {
                        gb[c] += g[r * f_out + c];
                    }
                }
            }
        }
        Op::AddBias { x, b } => {
            if nodes[*x].requires_grad {
                let gx = acc_slot(local, *x, nodes[*x].value.shape());
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if nodes[*b].requires_grad {
                let xshape = nodes[*x].value.shape().to_vec();
                let channels = xshape[1];
                let spatial: usize = xshape[2..].iter().product();
                let gb = acc_slot(local, *b, nodes[*b].value.shape());
                for n in 0..xshape[0] {
                    for c in 0..channels {
                        let base = (n * channels + c) * spatial;
                        let mut acc = E::zero();
                        for k in 0..spatial {
                            acc += g[base + k];
                        }
                        gb[c] += acc;
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            stride,
            padding,
        } => {
            let xshape = nodes[*x].value.shape().to_vec();
            let wshape = nodes[*w].value.shape().to_vec();
            if nodes[*x].requires_grad {
                let wv = nodes[*w].value.data();
                let gx = acc_slot(local, *x, &xshape);
                kernels::conv2d_backward_data(wv, &wshape, g, &xshape, *stride, *padding, gx);
            }
            if nodes[*w].requires_grad {
                let xv = nodes[*x].value.data();
                let gw = acc_slot(local, *w, &wshape);
                kernels::conv2d_backward_weight(xv, &xshape, g, &wshape, *stride, *padding, gw);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if nodes[*x].requires_grad {
                let gx = acc_slot(local, *x, nodes[*x].value.shape());
                for (j, &src) in argmax.iter().enumerate() {
                    gx[src] += g[j];
                }
            }
        }
        Op::UpsampleNearest { x, factor } => {
            if nodes[*x].requires_grad {
                let xshape = nodes[*x].value.shape().to_vec();
                let gx = acc_slot(local, *x, &xshape);
                kernels::upsample_nearest_backward(g, &xshape, *factor, gx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            ctx,
        } => {
            let xshape = nodes[*x].value.shape().to_vec();
            let xv = nodes[*x].value.data();
            let gammav = nodes[*gamma].value.data();
            if nodes[*gamma].requires_grad {
                let gg = acc_slot(local, *gamma, nodes[*gamma].value.shape());
                kernels::batchnorm_backward_gamma(g, xv, &xshape, ctx, gg);
            }
            if nodes[*beta].requires_grad {
                let gb = acc_slot(local, *beta, nodes[*beta].value.shape());
                kernels::batchnorm_backward_beta(g, &xshape, gb);
            }
            if nodes[*x].requires_grad {
                let gx = acc_slot(local, *x, &xshape);
                kernels::batchnorm_backward_data(g, xv, &xshape, gammav, ctx, gx);
            }
        }
        Op::ConcatC { a, b } => {
            let ashape = nodes[*a].value.shape().to_vec();
            let bshape = nodes[*b].value.shape().to_vec();
            let spatial: usize = ashape[2..].iter().product();
            let (ca, cb) = (ashape[1], bshape[1]);
            let batch = ashape[0];
            if nodes[*a].requires_grad {
                let ga = acc_slot(local, *a, &ashape);
                for n in 0..batch {
                    let src = n * (ca + cb) * spatial;
                    let dst = n * ca * spatial;
                    for k in 0..ca * spatial {
                        ga[dst + k] += g[src + k];
                    }
                }
            }
            if nodes[*b].requires_grad {
                let gb = acc_slot(local, *b, &bshape);
                for n in 0..batch {
                    let src = n * (ca + cb) * spatial + ca * spatial;
                    let dst = n * cb * spatial;
                    for k in 0..cb * spatial {
                        gb[dst + k] += g[src + k];
                    }
                }
            }
        }
        Op::Reduce {
            x,
            kind,
            axes,
            argmin,
        } => {
            if nodes[*x].requires_grad {
                let xshape = nodes[*x].value.shape().to_vec();
                match kind {
                    ReduceKind::Min => {
                        let gx = acc_slot(local, *x, &xshape);
                        for (j, &src) in argmin.as_ref().expect("min reduce saves argmin").iter().enumerate()
                        {
                            gx[src] += g[j];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let count: usize = axes.iter().map(|&a| xshape[a]).product();
                        let scale = match kind {
                            ReduceKind::Mean => E::one() / E::from_f64(count as f64),
                            _ => E::one(),
                        };
                        let gx = acc_slot(local, *x, &xshape);
                        kernels::reduce_backward_broadcast(g, &xshape, axes, scale, gx);
                    }
                }
            }
        }
        Op::Softmax { x } => {
            if nodes[*x].requires_grad {
                let p = nodes[i].value.data();
                let shape = nodes[*x].value.shape().to_vec();
                let (rows, k) = (shape[0], shape[1]);
                let gx = acc_slot(local, *x, &shape);
                for r in 0..rows {
                    let row = r * k;
                    let mut dot = E::zero();
                    for j in 0..k {
                        dot += g[row + j] * p[row + j];
                    }
                    for j in 0..k {
                        gx[row + j] += p[row + j] * (g[row + j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy { x, labels } => {
            if nodes[*x].requires_grad {
                let shape = nodes[*x].value.shape().to_vec();
                let (rows, k) = (shape[0], shape[1]);
                let xv = nodes[*x].value.data();
                let scale = g[0] / E::from_f64(rows as f64);
                let gx = acc_slot(local, *x, &shape);
                let mut prow = vec![E::zero(); k];
                for r in 0..rows {
                    kernels::softmax_row(&xv[r * k..(r + 1) * k], &mut prow);
                    for j in 0..k {
                        let indicator = if j == labels[r] { E::one() } else { E::zero() };
                        gx[r * k + j] += scale * (prow[j] - indicator);
                    }
                }
            }
        }
        Op::Slice0 { x, index } => {
            if nodes[*x].requires_grad {
                let xshape = nodes[*x].value.shape().to_vec();
                let block: usize = xshape[1..].iter().product();
                let gx = acc_slot(local, *x, &xshape);
                let base = index * block;
                for k in 0..block {
                    gx[base + k] += g[k];
                }
            }
        }
        Op::Reshape { x } => {
            if nodes[*x].requires_grad {
                let gx = acc_slot(local, *x, nodes[*x].value.shape());
                for (d, &gv) in gx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
    }
}
