//! Tape-style computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep that touches each node once.

use std::fmt;

use crate::error::TensorError;
use crate::kernels::{dot, gemm_nn, gemm_nt, gemm_tn, transpose};
use crate::tensor::{Scalar, Tensor};

/// Value added to masked attention logits before the softmax.
pub const MASK_VALUE: f64 = -1e30;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise binary operator for [`Graph::ewise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwiseOp {
    Add,
    Mul,
}

/// Primitive operation kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Mul,
    AddScalar,
    Scale,
    SoftmaxRows,
    CausalMask,
    Slice,
    Assemble,
    Gather,
    LayerNorm,
    Gelu,
    CrossEntropy,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddScalar,
        OpKind::Scale,
        OpKind::SoftmaxRows,
        OpKind::CausalMask,
        OpKind::Slice,
        OpKind::Assemble,
        OpKind::Gather,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Scale => "scale",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::CausalMask => "causal_mask",
            OpKind::Slice => "slice",
            OpKind::Assemble => "assemble",
            OpKind::Gather => "gather",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Transpose { a: Var },
    Ewise { op: EwiseOp, a: Var, b: Var, broadcast: bool },
    AddScalar { a: Var },
    Scale { a: Var, c: T },
    SoftmaxRows { a: Var },
    CausalMask { a: Var },
    Slice { a: Var, r0: usize, c0: usize },
    Assemble { parts: Vec<(Var, usize, usize)> },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var, th: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum { a: Var },
    Mean { a: Var },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulNt { .. } => OpKind::MatMulNt,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Ewise { op: EwiseOp::Add, .. } => OpKind::Add,
            Op::Ewise { op: EwiseOp::Mul, .. } => OpKind::Mul,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Scale { .. } => OpKind::Scale,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::CausalMask { .. } => OpKind::CausalMask,
            Op::Slice { .. } => OpKind::Slice,
            Op::Assemble { .. } => OpKind::Assemble,
            Op::Gather { .. } => OpKind::Gather,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn require_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Contract(format!("{op}: expected a 2-D tensor, got shape {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// Negates every gradient contribution produced by `kind` during
    /// [`Graph::backward`]. Used by the gradient checker's mutation test.
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in differentiation iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    /// Intermediate gradients are released during the sweep.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the leaf's value with its gradient slot filled.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = self.nodes[v.0].value.clone();
        t.set_requires_grad(self.nodes[v.0].requires_grad);
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("grad length matches value");
        }
        t
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn finish(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NumericInput { op: name });
        }
        Ok(self.push(value, op, rg))
    }

    /// Matrix product `a[m×k] · b[k×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (k2, p) = require_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * p];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(vec![m, p], out)?;
        self.finish("matmul", t, Op::MatMul { a, b }, rg)
    }

    /// `a[m×k] · b[p×k]ᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = require_2d("matmul_nt", self.value(a))?;
        let (p, k2) = require_2d("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * p];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(vec![m, p], out)?;
        self.finish("matmul_nt", t, Op::MatMulNt { a, b }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = require_2d("transpose", self.value(a))?;
        let data = transpose(self.value(a).data(), r, c);
        let rg = self.rg(a);
        let t = Tensor::new(vec![c, r], data)?;
        self.finish("transpose", t, Op::Transpose { a }, rg)
    }

    /// Elementwise add or multiply. `b` either matches `a`'s shape or is a
    /// vector (shape `[k]` or `[1, k]`) broadcast along `a`'s last dimension.
    pub fn ewise(&mut self, op: EwiseOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match op {
            EwiseOp::Add => "add",
            EwiseOp::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let broadcast = if sa == sb {
            false
        } else {
            let last = *sa.last().expect("nonempty");
            let is_vec = matches!(sb.as_slice(), [k] if *k == last) || matches!(sb.as_slice(), [1, k] if *k == last);
            if !is_vec {
                return Err(dim_err(name, &sa, &sb));
            }
            true
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let k = bv.len();
        let data: Vec<T> = match (op, broadcast) {
            (EwiseOp::Add, false) => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            (EwiseOp::Mul, false) => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
            (EwiseOp::Add, true) => av.iter().enumerate().map(|(i, &x)| x + bv[i % k]).collect(),
            (EwiseOp::Mul, true) => av.iter().enumerate().map(|(i, &x)| x * bv[i % k]).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(sa, data)?;
        self.finish(name, t, Op::Ewise { op, a, b, broadcast }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.ewise(EwiseOp::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.ewise(EwiseOp::Mul, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.finish("add_scalar", t, Op::AddScalar { a }, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.finish("scale", t, Op::Scale { a, c }, rg)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = require_2d("softmax_rows", self.value(a))?;
        let src = self.value(a).data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NumericInput { op: "softmax_rows" });
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_into(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        let t = Tensor::new(vec![r, c], out)?;
        self.finish("softmax_rows", t, Op::SoftmaxRows { a }, rg)
    }

    /// Adds [`MASK_VALUE`] to every entry `(t, s)` with `s > t`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = require_2d("causal_mask", self.value(a))?;
        let mut data = self.value(a).data().to_vec();
        let m = T::from_f64(MASK_VALUE);
        for t in 0..r {
            for s in (t + 1)..c {
                data[t * c + s] += m;
            }
        }
        let rg = self.rg(a);
        let t = Tensor::new(vec![r, c], data)?;
        self.finish("causal_mask", t, Op::CausalMask { a }, rg)
    }

    /// Copies the block `a[r0..r0+rows, c0..c0+cols]`.
    pub fn slice(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var, TensorError> {
        let (r, c) = require_2d("slice", self.value(a))?;
        if rows == 0 || cols == 0 || r0 + rows > r || c0 + cols > c {
            return Err(dim_err("slice", &[r, c], &[r0, rows, c0, cols]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * cols);
        for i in r0..r0 + rows {
            data.extend_from_slice(&src[i * c + c0..i * c + c0 + cols]);
        }
        let rg = self.rg(a);
        let t = Tensor::new(vec![rows, cols], data)?;
        self.finish("slice", t, Op::Slice { a, r0, c0 }, rg)
    }

    /// Places 2-D blocks into a zero `rows × cols` matrix at the given
    /// offsets. Blocks must not overlap; the same var may appear repeatedly.
    pub fn assemble(&mut self, rows: usize, cols: usize, parts: &[(Var, usize, usize)]) -> Result<Var, TensorError> {
        let mut data = vec![T::zero(); rows * cols];
        let mut covered = vec![false; rows * cols];
        for &(v, r0, c0) in parts {
            let (pr, pc) = require_2d("assemble", self.value(v))?;
            if r0 + pr > rows || c0 + pc > cols {
                return Err(dim_err("assemble", &[rows, cols], &[r0, pr, c0, pc]));
            }
            let src = self.value(v).data();
            for i in 0..pr {
                for j in 0..pc {
                    let idx = (r0 + i) * cols + c0 + j;
                    if covered[idx] {
                        return Err(TensorError::Contract(format!(
                            "assemble: block at ({r0}, {c0}) overlaps another block"
                        )));
                    }
                    covered[idx] = true;
                    data[idx] = src[i * pc + j];
                }
            }
        }
        let rg = parts.iter().any(|&(v, _, _)| self.rg(v));
        let t = Tensor::new(vec![rows, cols], data)?;
        self.finish("assemble", t, Op::Assemble { parts: parts.to_vec() }, rg)
    }

    /// Horizontal concatenation of equally tall blocks.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.shape(parts[0])[0];
        let mut placed = Vec::with_capacity(parts.len());
        let mut c0 = 0;
        for &p in parts {
            let (r, c) = require_2d("concat_cols", self.value(p))?;
            if r != rows {
                return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            placed.push((p, 0, c0));
            c0 += c;
        }
        self.assemble(rows, c0, &placed)
    }

    /// Vertical concatenation of equally wide blocks.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.shape(parts[0])[1];
        let mut placed = Vec::with_capacity(parts.len());
        let mut r0 = 0;
        for &p in parts {
            let (r, c) = require_2d("concat_rows", self.value(p))?;
            if c != cols {
                return Err(dim_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            placed.push((p, r0, 0));
            r0 += r;
        }
        self.assemble(r0, cols, &placed)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = require_2d("gather", self.value(table))?;
        if ids.is_empty() {
            return Err(TensorError::Contract("gather: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Contract(format!("gather: id {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.finish("gather", t, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies a
    /// per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = require_2d("layer_norm", self.value(x))?;
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(dim_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::from_f64(c as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let t = Tensor::new(vec![r, c], out)?;
        self.finish("layer_norm", t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a).data();
        let th: Vec<T> = x.iter().map(|&x| gelu_tanh(x)).collect();
        let data = x.iter().zip(&th).map(|(&x, &t)| T::from_f64(0.5) * x * (T::one() + t)).collect();
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.finish("gelu", t, Op::Gelu { a, th }, rg)
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let (r, v) = require_2d("cross_entropy", self.value(logits))?;
        if targets.len() != r {
            return Err(dim_err("cross_entropy", &[r, v], &[targets.len()]));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Contract("cross_entropy: no scored positions".into()));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(TensorError::Contract(format!("cross_entropy: target {bad} out of range for {v} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for i in 0..r {
            softmax_into(&src[i * v..(i + 1) * v], &mut probs[i * v..(i + 1) * v]);
            if let Some(t) = targets[i] {
                total += -log_softmax_at(&src[i * v..(i + 1) * v], t);
            }
        }
        let loss = total / T::from_f64(count as f64);
        let rg = self.rg(logits);
        self.finish(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.finish("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        let rg = self.rg(a);
        self.finish("mean", Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Populates gradients of `loss` with respect to every leaf that
    /// requires grad. `loss` must hold exactly one element.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.propagate(i, &gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>, sign: T) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += sign * ci;
                }
            }
            slot @ None => {
                *slot = Some(if sign == T::one() { contrib } else { contrib.into_iter().map(|c| sign * c).collect() });
            }
        }
    }

    fn propagate(&mut self, i: usize, gout: &[T]) {
        let sign = if self.fault == Some(self.nodes[i].op.kind()) { -T::one() } else { T::one() };
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(gout, self.value(*b).data(), &mut ga, m, p, k);
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * p];
                    gemm_tn(self.value(*a).data(), gout, &mut gb, m, k, p);
                    out.push((*b, gb));
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[0];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nn(gout, self.value(*b).data(), &mut ga, m, p, k);
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); p * k];
                    gemm_tn(gout, self.value(*a).data(), &mut gb, m, p, k);
                    out.push((*b, gb));
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                out.push((*a, transpose(gout, c, r)));
            }
            Op::Ewise { op, a, b, broadcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = bv.len();
                if self.rg(*a) {
                    let ga = match op {
                        EwiseOp::Add => gout.to_vec(),
                        EwiseOp::Mul => gout.iter().enumerate().map(|(j, &g)| g * bv[j % k]).collect(),
                    };
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let gb = if *broadcast {
                        let mut gb = vec![T::zero(); k];
                        for (j, &g) in gout.iter().enumerate() {
                            gb[j % k] += match op {
                                EwiseOp::Add => g,
                                EwiseOp::Mul => g * av[j],
                            };
                        }
                        gb
                    } else {
                        match op {
                            EwiseOp::Add => gout.to_vec(),
                            EwiseOp::Mul => gout.iter().zip(av).map(|(&g, &x)| g * x).collect(),
                        }
                    };
                    out.push((*b, gb));
                }
            }
            Op::AddScalar { a } => out.push((*a, gout.to_vec())),
            Op::Scale { a, c } => out.push((*a, gout.iter().map(|&g| g * *c).collect())),
            Op::SoftmaxRows { a } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut ga = vec![T::zero(); y.len()];
                for r in 0..node.value.rows() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &gout[r * c..(r + 1) * c];
                    let s = dot(yr, gr);
                    for j in 0..c {
                        ga[r * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                out.push((*a, ga));
            }
            Op::CausalMask { a } => out.push((*a, gout.to_vec())),
            Op::Slice { a, r0, c0 } => {
                let (a, r0, c0) = (*a, *r0, *c0);
                if !self.rg(a) {
                    return;
                }
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let (ar, ac) = (self.shape(a)[0], self.shape(a)[1]);
                let ga = self.grads[a.0].get_or_insert_with(|| vec![T::zero(); ar * ac]);
                for i in 0..rows {
                    let dst = &mut ga[(r0 + i) * ac + c0..(r0 + i) * ac + c0 + cols];
                    for (d, &g) in dst.iter_mut().zip(&gout[i * cols..(i + 1) * cols]) {
                        *d += sign * g;
                    }
                }
            }
            Op::Assemble { parts } => {
                let cols = node.value.cols();
                for &(v, r0, c0) in parts {
                    if !self.rg(v) {
                        continue;
                    }
                    let (pr, pc) = (self.shape(v)[0], self.shape(v)[1]);
                    let mut gp = Vec::with_capacity(pr * pc);
                    for r in 0..pr {
                        gp.extend_from_slice(&gout[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + pc]);
                    }
                    out.push((v, gp));
                }
            }
            Op::Gather { table, ids } => {
                let (v, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                let mut gt = vec![T::zero(); v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gout[row * d + j];
                    }
                }
                out.push((*table, gt));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = node.value.cols();
                let r = node.value.rows();
                let g = self.value(*gain).data();
                if self.rg(*gain) {
                    let mut gg = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += gout[i * c + j] * xhat[i * c + j];
                        }
                    }
                    out.push((*gain, gg));
                }
                if self.rg(*bias) {
                    let mut gb = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += gout[i * c + j];
                        }
                    }
                    out.push((*bias, gb));
                }
                if self.rg(*x) {
                    let n = T::from_f64(c as f64);
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = gout[i * c + j] * g[j];
                            mean_d += d;
                            mean_dx += d * xhat[i * c + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            let d = gout[i * c + j] * g[j];
                            gx[i * c + j] = rstd[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Gelu { a, th } => {
                let av = self.value(*a).data();
                let ga = av.iter().zip(th).zip(gout).map(|((&x, &t), &g)| g * gelu_grad(x, t)).collect();
                out.push((*a, ga));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.shape(*logits)[1];
                let scale = gout[0] / T::from_f64(*count as f64);
                let mut gl = vec![T::zero(); probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..v {
                            gl[i * v + j] = probs[i * v + j] * scale;
                        }
                        gl[i * v + t] -= scale;
                    }
                }
                out.push((*logits, gl));
            }
            Op::Sum { a } => out.push((*a, vec![gout[0]; self.value(*a).numel()])),
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                out.push((*a, vec![gout[0] / T::from_f64(n as f64); n]));
            }
        }
        for (v, g) in out {
            self.accumulate(v, g, sign);
        }
    }
}

pub(crate) fn softmax_into<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

/// `log softmax(row)[target]`, computed with the log-sum-exp shift.
pub(crate) fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row[target] - lse
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh(√(2/π)·(x + 0.044715·x³))`
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let u = T::from_f64(GELU_K) * (x + T::from_f64(0.044715) * x * x * x);
    u.tanh()
}

/// Derivative of the tanh-approximated GELU given `th = gelu_tanh(x)`.
fn gelu_grad<T: Scalar>(x: T, th: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * k * (T::one() + T::from_f64(3.0) * c * x * x)
}
