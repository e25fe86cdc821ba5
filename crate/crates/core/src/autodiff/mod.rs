//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, which is also a topological order. [`Graph::backward`] walks that
//! tape once in reverse, summing adjoints for values with several consumers.
//!
//! The operator set is deliberately small: exactly what the encoder,
//! transformation decoder, objective and probes need. Broadcasting is limited
//! to one-element operands; anything else needs an explicit reshape.
//!
//! ```
//! use avt_core::autodiff::Graph;
//! use avt_core::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::new([2], vec![1.0, -2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
//! ```

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, InputCheck};

use kernels::ConvGeom;
use thiserror::Error;

use crate::tensor::{Scalar, ShapeError, Tensor};

/// Epsilon added to the variance in batch normalization.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("log: non-positive input {value} at index {index}")]
    Domain { index: usize, value: f64 },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("batch_norm2d: train mode needs at least two values per channel, got {0}")]
    SingleElementBatch(usize),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel moving averages maintained by train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Deliberately wrong adjoints, used as negative controls for the
/// gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointFault {
    /// ReLU passes back half of the incoming gradient.
    Relu,
    /// conv2d kernel gradient is scaled by 1.1.
    Conv2dKernel,
}

impl std::str::FromStr for AdjointFault {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(AdjointFault::Relu),
            "conv2d" | "conv2d-kernel" => Ok(AdjointFault::Conv2dKernel),
            other => Err(format!("unknown adjoint fault `{other}` (expected relu or conv2d)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool(Var),
    ConcatCols(Var, Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatRows(Var, Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recording of one differentiable computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<AdjointFault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument { op, msg: msg.into() }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// A graph whose backward pass applies `fault`.
    pub fn with_fault(fault: Option<AdjointFault>) -> Self {
        Graph {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Broadcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok((Broadcast::Same, sa.to_vec()))
        } else if self.value(b).numel() == 1 {
            Ok((Broadcast::RhsScalar, sa.to_vec()))
        } else if self.value(a).numel() == 1 {
            Ok((Broadcast::LhsScalar, sb.to_vec()))
        } else {
            Err(mismatch(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let (bc, shape) = self.broadcast(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<T> = match bc {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RhsScalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Broadcast::LhsScalar => db.iter().map(|&y| f(da[0], y)).collect(),
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, mk(a, b, bc), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.map(a, |x| x + c);
        self.push_op(v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.map(a, |x| x * c);
        self.push_op(v, Op::MulScalar(a, c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.exp());
        self.push_op(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self.data(a).iter().enumerate().find(|(_, &x)| !(x > T::zero())) {
            return Err(AutodiffError::Domain {
                index,
                value: value.as_f64(),
            });
        }
        let v = self.map(a, |x| x.ln());
        Ok(self.push_op(v, Op::Log(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push_op(v, Op::Relu(a), &[a])
    }

    /// Clamp into `[lo, hi]`; values outside the range get zero gradient.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.map(a, |x| x.max(lo).min(hi));
        self.push_op(v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).expect("numel fits");
        let s = self.sum(a);
        self.mul_scalar(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(v, Op::Reshape(a), &[a]))
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("map preserves shape")
    }

    /// 2-d cross-correlation of an `N×C×H×W` input with an `O×C×K×K` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] {
            return Err(mismatch("conv2d", si, sk));
        }
        if si[1] != sk[1] {
            return Err(mismatch("conv2d", si, sk));
        }
        if sb != [sk[0]] {
            return Err(mismatch("conv2d", sk, sb));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (h, w, k) = (si[2], si[3], sk[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(invalid(
                "conv2d",
                format!("kernel {k} does not fit input {h}×{w} with padding {pad}"),
            ));
        }
        let geom = ConvGeom {
            batch: si[0],
            in_ch: si[1],
            height: h,
            width: w,
            out_ch: sk[0],
            kernel: k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.data(input), self.data(kernel), self.data(bias));
        let value = Tensor::new([geom.batch, geom.out_ch, geom.out_h, geom.out_w], out)?;
        Ok(self.push_op(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    /// Affine map `input·weight + bias` for `N×D` input and `D×M` weight.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 2 || sw.len() != 2 || si[1] != sw[0] {
            return Err(mismatch("dense", si, sw));
        }
        if sb != [sw[1]] {
            return Err(mismatch("dense", sw, sb));
        }
        let (n, d, m) = (si[0], si[1], sw[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.data(bias));
        }
        crate::tensor::gemm(false, false, n, m, d, T::one(), self.data(input), self.data(weight), T::one(), &mut out);
        let value = Tensor::new([n, m], out)?;
        Ok(self.push_op(value, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    /// Batch normalization over an `N×C×H×W` input.
    ///
    /// Train mode normalizes with biased batch statistics and folds them into
    /// `stats` (unbiased variance, momentum [`BN_MOMENTUM`]); eval mode
    /// normalizes with `stats`.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        stats: &mut RunningStats<T>,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if si.len() != 4 {
            return Err(invalid("batch_norm2d", format!("expected N×C×H×W input, got {si:?}")));
        }
        let c = si[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("batch_norm2d", &si, self.shape(p)));
            }
        }
        if stats.channels() != c {
            return Err(mismatch("batch_norm2d", &si, &[stats.channels()]));
        }
        let per_channel = si[0] * si[2] * si[3];
        let train = mode == BnMode::Train;
        if train && per_channel < 2 {
            return Err(AutodiffError::SingleElementBatch(per_channel));
        }
        let dims = [si[0], si[1], si[2], si[3]];
        let eps = T::from_f64_lossy(BN_EPSILON);
        let fwd = kernels::batch_norm_forward(
            self.data(input),
            dims,
            self.data(gamma),
            self.data(beta),
            eps,
            (!train).then_some((stats.mean.as_slice(), stats.var.as_slice())),
        );
        if train {
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let unbias = T::from_usize(per_channel).unwrap() / T::from_usize(per_channel - 1).unwrap();
            for ch in 0..c {
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * fwd.batch_mean[ch];
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * fwd.batch_var[ch] * unbias;
            }
        }
        let value = Tensor::new(si, fwd.output)?;
        Ok(self.push_op(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                train,
            },
            &[input, gamma, beta],
        ))
    }

    /// Spatial mean of an `N×C×H×W` input, giving `N×C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if si.len() != 4 {
            return Err(invalid("global_avg_pool", format!("expected N×C×H×W input, got {si:?}")));
        }
        let plane = si[2] * si[3];
        let inv = T::one() / T::from_usize(plane).unwrap();
        let out: Vec<T> = self
            .data(input)
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([si[0], si[1]], out)?;
        Ok(self.push_op(value, Op::GlobalAvgPool(input), &[input]))
    }

    /// Concatenate `N×D1` and `N×D2` along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(mismatch("concat", sa, sb));
        }
        let (n, d1, d2) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * (d1 + d2));
        for r in 0..n {
            out.extend_from_slice(&da[r * d1..(r + 1) * d1]);
            out.extend_from_slice(&db[r * d2..(r + 1) * d2]);
        }
        let value = Tensor::new([n, d1 + d2], out)?;
        Ok(self.push_op(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Columns `start..start + len` of an `N×D` input.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let si = self.shape(input);
        if si.len() != 2 || start + len > si[1] {
            return Err(invalid("slice_cols", format!("columns {start}..{} of {si:?}", start + len)));
        }
        let (n, d) = (si[0], si[1]);
        let src = self.data(input);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let value = Tensor::new([n, len], out)?;
        Ok(self.push_op(value, Op::SliceCols { input, start }, &[input]))
    }

    /// Stack two tensors along the leading (batch) axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa[1..] != sb[1..] || sa.len() != sb.len() {
            return Err(mismatch("concat_rows", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut out = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let si = self.shape(input);
        if si.is_empty() || start + len > si[0] {
            return Err(invalid("slice_rows", format!("rows {start}..{} of {si:?}", start + len)));
        }
        let value = self.value(input).slice_rows(start, len);
        Ok(self.push_op(value, Op::SliceRows { input, start }, &[input]))
    }

    /// Batch-mean softmax cross-entropy of `N×C` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(mismatch("softmax_cross_entropy", sl, &[labels.len()]));
        }
        let (n, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid("softmax_cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let x = self.data(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / z;
            }
            loss = loss + (z.ln() + max - row[labels[r]]);
        }
        loss = loss / T::from_usize(n.max(1)).unwrap();
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a one-element `loss`; leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *d;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (v, contribution) in self.adjoints(i, &g) {
                accumulate(&mut grads, v, contribution);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input adjoints of node `i` given its output adjoint `g`.
    fn adjoints(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::with_capacity(3);
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.needs(v) {
                out.push((v, f()));
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b, bc) => {
                emit(a, &|| reduce_if(bc == Broadcast::LhsScalar, g.to_vec()));
                emit(b, &|| reduce_if(bc == Broadcast::RhsScalar, g.to_vec()));
            }
            &Op::Sub(a, b, bc) => {
                emit(a, &|| reduce_if(bc == Broadcast::LhsScalar, g.to_vec()));
                emit(b, &|| reduce_if(bc == Broadcast::RhsScalar, g.iter().map(|&x| -x).collect()));
            }
            &Op::Mul(a, b, bc) => {
                let (da, db) = (self.data(a), self.data(b));
                let pick = |d: &[T], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                emit(a, &|| {
                    let full = g.iter().enumerate().map(|(j, &x)| x * pick(db, j)).collect();
                    reduce_if(bc == Broadcast::LhsScalar, full)
                });
                emit(b, &|| {
                    let full = g.iter().enumerate().map(|(j, &x)| x * pick(da, j)).collect();
                    reduce_if(bc == Broadcast::RhsScalar, full)
                });
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => emit(a, &|| g.to_vec()),
            &Op::MulScalar(a, c) => emit(a, &|| g.iter().map(|&x| x * c).collect()),
            &Op::Exp(a) => {
                let y = self.nodes[i].value.data();
                emit(a, &|| g.iter().zip(y).map(|(&d, &v)| d * v).collect());
            }
            &Op::Log(a) => {
                let x = self.data(a);
                emit(a, &|| g.iter().zip(x).map(|(&d, &v)| d / v).collect());
            }
            &Op::Relu(a) => {
                let x = self.data(a);
                let slope = if self.fault == Some(AdjointFault::Relu) {
                    T::from_f64_lossy(0.5)
                } else {
                    T::one()
                };
                emit(a, &|| {
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > T::zero() { d * slope } else { T::zero() })
                        .collect()
                });
            }
            &Op::Clamp(a, lo, hi) => {
                let x = self.data(a);
                emit(a, &|| {
                    g.iter()
                        .zip(x)
                        .map(|(&d, &v)| if v >= lo && v <= hi { d } else { T::zero() })
                        .collect()
                });
            }
            &Op::Sum(a) => emit(a, &|| vec![g[0]; self.value(a).numel()]),
            &Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    &geom,
                    self.data(input),
                    self.data(kernel),
                    g,
                    [self.needs(input), self.needs(kernel), self.needs(bias)],
                );
                if let Some(d) = grads.input {
                    out.push((input, d));
                }
                if let Some(mut d) = grads.kernel {
                    if self.fault == Some(AdjointFault::Conv2dKernel) {
                        let s = T::from_f64_lossy(1.1);
                        d.iter_mut().for_each(|v| *v = *v * s);
                    }
                    out.push((kernel, d));
                }
                if let Some(d) = grads.bias {
                    out.push((bias, d));
                }
            }
            &Op::Dense { input, weight, bias } => {
                let (si, sw) = (self.shape(input), self.shape(weight));
                let (n, d, m) = (si[0], si[1], sw[1]);
                emit(input, &|| {
                    let mut dx = vec![T::zero(); n * d];
                    crate::tensor::gemm(false, true, n, d, m, T::one(), g, self.data(weight), T::zero(), &mut dx);
                    dx
                });
                emit(weight, &|| {
                    let mut dw = vec![T::zero(); d * m];
                    crate::tensor::gemm(true, false, d, m, n, T::one(), self.data(input), g, T::zero(), &mut dw);
                    dw
                });
                emit(bias, &|| {
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (b, &v) in db.iter_mut().zip(row) {
                            *b = *b + v;
                        }
                    }
                    db
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*input);
                let dims = [s[0], s[1], s[2], s[3]];
                let (dx, dgamma, dbeta) =
                    kernels::batch_norm_backward(g, dims, self.data(*gamma), xhat, inv_std, *train);
                for (v, d) in [(*input, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if self.needs(v) {
                        out.push((v, d));
                    }
                }
            }
            &Op::GlobalAvgPool(a) => {
                let s = self.shape(a);
                let plane = s[2] * s[3];
                let inv = T::one() / T::from_usize(plane).unwrap();
                emit(a, &|| g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, plane)).collect());
            }
            &Op::ConcatCols(a, b) => {
                let (d1, d2) = (self.shape(a)[1], self.shape(b)[1]);
                let rows = || g.chunks(d1 + d2);
                emit(a, &|| rows().flat_map(|r| r[..d1].to_vec()).collect());
                emit(b, &|| rows().flat_map(|r| r[d1..].to_vec()).collect());
            }
            &Op::SliceCols { input, start } => {
                let s = self.shape(input);
                let (n, d) = (s[0], s[1]);
                let len = g.len() / n.max(1);
                emit(input, &|| {
                    let mut dx = vec![T::zero(); n * d];
                    for r in 0..n {
                        dx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    dx
                });
            }
            &Op::ConcatRows(a, b) => {
                let split = self.value(a).numel();
                emit(a, &|| g[..split].to_vec());
                emit(b, &|| g[split..].to_vec());
            }
            &Op::SliceRows { input, start } => {
                let t = self.value(input);
                let row: usize = t.shape()[1..].iter().product();
                emit(input, &|| {
                    let mut dx = vec![T::zero(); t.numel()];
                    dx[start * row..start * row + g.len()].copy_from_slice(g);
                    dx
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(labels.len().max(1)).unwrap();
                emit(*logits, &|| {
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * c + l] = d[r * c + l] - T::one();
                    }
                    d.iter_mut().for_each(|v| *v = *v * scale);
                    d
                });
            }
        }
        out
    }
}

fn reduce_if<T: Scalar>(reduce: bool, g: Vec<T>) -> Vec<T> {
    if reduce {
        vec![g.into_iter().sum()]
    } else {
        g
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match grads[v.0].as_mut() {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a = *a + c;
            }
        }
        None => grads[v.0] = Some(contribution),
    }
}
