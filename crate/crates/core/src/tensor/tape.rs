//! Wengert-list tape: every primitive application that touches a
//! differentiable operand is recorded, and `backward` replays the list in
//! reverse exactly once.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels as k;
use super::{Real, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Identifier of a primitive operation, for [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    AddBias,
    Mul,
    Scale,
    Concat,
    Slice,
    Embedding,
    LayerNorm,
    GroupNorm,
    Softmax,
    LogSoftmax,
    Sigmoid,
    Tanh,
    Swish,
    Glu,
    DepthwiseConv1d,
    MaskedFill,
    Transpose,
    Reshape,
    Sum,
    Mean,
    RelShift,
    TransducerLoss,
}

impl Primitive {
    pub const ALL: [Primitive; 24] = [
        Self::MatMul,
        Self::Add,
        Self::AddBias,
        Self::Mul,
        Self::Scale,
        Self::Concat,
        Self::Slice,
        Self::Embedding,
        Self::LayerNorm,
        Self::GroupNorm,
        Self::Softmax,
        Self::LogSoftmax,
        Self::Sigmoid,
        Self::Tanh,
        Self::Swish,
        Self::Glu,
        Self::DepthwiseConv1d,
        Self::MaskedFill,
        Self::Transpose,
        Self::Reshape,
        Self::Sum,
        Self::Mean,
        Self::RelShift,
        Self::TransducerLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MatMul => "matmul",
            Self::Add => "add",
            Self::AddBias => "add_bias",
            Self::Mul => "mul",
            Self::Scale => "scale",
            Self::Concat => "concat",
            Self::Slice => "slice",
            Self::Embedding => "embedding",
            Self::LayerNorm => "layer_norm",
            Self::GroupNorm => "group_norm",
            Self::Softmax => "softmax",
            Self::LogSoftmax => "log_softmax",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Swish => "swish",
            Self::Glu => "glu",
            Self::DepthwiseConv1d => "depthwise_conv1d",
            Self::MaskedFill => "masked_fill",
            Self::Transpose => "transpose",
            Self::Reshape => "reshape",
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::RelShift => "rel_shift",
            Self::TransducerLoss => "transducer_loss",
        }
    }
}

impl FromStr for Primitive {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| TensorError::UnknownPrimitive(s.to_owned()))
    }
}

/// Attributes for [`Tape::apply`]. Each primitive reads only the fields it
/// needs and reports the missing ones as [`TensorError::InvalidAttr`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub trans_b: bool,
    pub axis: Option<usize>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub indices: Option<Vec<usize>>,
    pub groups: Option<usize>,
    pub eps: Option<f64>,
    pub factor: Option<f64>,
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub mask: Option<Vec<bool>>,
    pub fill: Option<f64>,
    pub shape: Option<Vec<usize>>,
    pub targets: Option<Vec<usize>>,
    pub frames: Option<usize>,
}

fn need<T>(op: &'static str, field: &str, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| TensorError::InvalidAttr { op, detail: format!("missing `{field}`") })
}

enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    AddBias { x: usize, bias: usize },
    Mul(usize, usize),
    Scale { x: usize, factor: S },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Embedding { table: usize, indices: Vec<usize> },
    Norm { x: usize, gamma: usize, beta: usize, groups: usize, rstd: Vec<S> },
    Softmax(usize),
    LogSoftmax(usize),
    Sigmoid(usize),
    Tanh(usize),
    Swish(usize),
    Glu(usize),
    DepthwiseConv { x: usize, w: usize, left: usize, right: usize },
    MaskedFill { x: usize, mask: Arc<[bool]> },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    RelShift(usize),
    Transducer { logits: usize, targets: Vec<usize>, frames: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording of one forward pass. Confined to a single thread.
pub struct Tape<S: Real = f32> {
    id: u64,
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn dims2(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match t {
        [r, c] => Ok((*r, *c)),
        _ => Err(mismatch(op, format!("expected a 2-D operand, got {t:?}"))),
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.value(v);
        self.nodes[v.index].requires_grad
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(TensorError::NotOnTape)
        }
    }

    fn val(&self, i: usize) -> &Tensor<S> {
        &self.nodes[i].value
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    /// Generic entry point: applies the primitive `kind` to `operands`.
    pub fn apply(&mut self, kind: Primitive, operands: &[Var], attrs: &Attrs) -> Result<Var> {
        let name = kind.name();
        let arity = |n: usize| -> Result<()> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(mismatch(name, format!("expected {n} operands, got {}", operands.len())))
            }
        };
        match kind {
            Primitive::MatMul => {
                arity(2)?;
                if attrs.trans_b {
                    self.matmul_t(operands[0], operands[1])
                } else {
                    self.matmul(operands[0], operands[1])
                }
            }
            Primitive::Add => {
                arity(2)?;
                self.add(operands[0], operands[1])
            }
            Primitive::AddBias => {
                arity(2)?;
                self.add_bias(operands[0], operands[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(operands[0], operands[1])
            }
            Primitive::Scale => {
                arity(1)?;
                self.scale(operands[0], need(name, "factor", attrs.factor)?)
            }
            Primitive::Concat => self.concat(operands, need(name, "axis", attrs.axis)?),
            Primitive::Slice => {
                arity(1)?;
                self.slice(
                    operands[0],
                    need(name, "axis", attrs.axis)?,
                    need(name, "start", attrs.start)?,
                    need(name, "len", attrs.len)?,
                )
            }
            Primitive::Embedding => {
                arity(1)?;
                self.embedding(operands[0], need(name, "indices", attrs.indices.as_deref())?)
            }
            Primitive::LayerNorm => {
                arity(3)?;
                self.layer_norm(operands[0], operands[1], operands[2], attrs.eps.unwrap_or(1e-5))
            }
            Primitive::GroupNorm => {
                arity(3)?;
                self.group_norm(
                    operands[0],
                    operands[1],
                    operands[2],
                    need(name, "groups", attrs.groups)?,
                    attrs.eps.unwrap_or(1e-5),
                )
            }
            Primitive::Softmax => {
                arity(1)?;
                self.softmax(operands[0])
            }
            Primitive::LogSoftmax => {
                arity(1)?;
                self.log_softmax(operands[0])
            }
            Primitive::Sigmoid => {
                arity(1)?;
                self.sigmoid(operands[0])
            }
            Primitive::Tanh => {
                arity(1)?;
                self.tanh(operands[0])
            }
            Primitive::Swish => {
                arity(1)?;
                self.swish(operands[0])
            }
            Primitive::Glu => {
                arity(1)?;
                self.glu(operands[0])
            }
            Primitive::DepthwiseConv1d => {
                arity(2)?;
                self.depthwise_conv1d(
                    operands[0],
                    operands[1],
                    need(name, "left", attrs.left)?,
                    need(name, "right", attrs.right)?,
                )
            }
            Primitive::MaskedFill => {
                arity(1)?;
                let mask: Arc<[bool]> = need(name, "mask", attrs.mask.clone())?.into();
                self.masked_fill(operands[0], mask, need(name, "fill", attrs.fill)?)
            }
            Primitive::Transpose => {
                arity(1)?;
                self.transpose(operands[0])
            }
            Primitive::Reshape => {
                arity(1)?;
                self.reshape(operands[0], need(name, "shape", attrs.shape.clone())?)
            }
            Primitive::Sum => {
                arity(1)?;
                self.sum(operands[0])
            }
            Primitive::Mean => {
                arity(1)?;
                self.mean(operands[0])
            }
            Primitive::RelShift => {
                arity(1)?;
                self.rel_shift(operands[0])
            }
            Primitive::TransducerLoss => {
                arity(1)?;
                self.transducer_loss(
                    operands[0],
                    need(name, "targets", attrs.targets.as_deref())?,
                    need(name, "frames", attrs.frames)?,
                )
            }
        }
    }

    /// `[m x k] * [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m x k] * [n x k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (m, ka) = dims2("matmul", self.val(ai).shape())?;
        let (br, bc) = dims2("matmul", self.val(bi).shape())?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(mismatch(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", self.val(ai).shape(), self.val(bi).shape()),
            ));
        }
        let out = k::matmul(self.val(ai).data(), self.val(bi).data(), m, ka, n, trans_b);
        let value = Tensor::new([m, n], out)?;
        self.push("matmul", value, Op::MatMul { a: ai, b: bi, trans_b }, &[ai, bi])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<(usize, usize, Tensor<S>)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.val(ai), self.val(bi));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::new(va.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(ai, bi), &[ai, bi])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(ai, bi), &[ai, bi])
    }

    /// Adds a `[C]` bias to every row of a `[n x C]` matrix; the only
    /// broadcasting the engine performs.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(bias)?);
        let (_, c) = dims2("add_bias", self.val(xi).shape())?;
        if self.val(bi).shape() != [c] {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", self.val(xi).shape(), self.val(bi).shape())));
        }
        let b = self.val(bi).data();
        let mut data = self.val(xi).data().to_vec();
        if c > 0 {
            for row in data.chunks_exact_mut(c) {
                for (v, &bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(self.val(xi).shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias { x: xi, bias: bi }, &[xi, bi])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let f = S::of(factor);
        let v = self.val(xi);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * f).collect())?;
        self.push("scale", value, Op::Scale { x: xi, factor: f }, &[xi])
    }

    /// Concatenates 2-D operands along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::InvalidAttr { op: "concat", detail: "need >= 1 part and axis in {0, 1}".into() });
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let dims: Vec<(usize, usize)> =
            idx.iter().map(|&i| dims2("concat", self.val(i).shape())).collect::<Result<_>>()?;
        let value = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(mismatch("concat", format!("column counts differ: {dims:?}")));
            }
            let rows = dims.iter().map(|d| d.0).sum::<usize>();
            let data = idx.iter().flat_map(|&i| self.val(i).data().iter().copied()).collect();
            Tensor::new([rows, c], data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(mismatch("concat", format!("row counts differ: {dims:?}")));
            }
            let cols = dims.iter().map(|d| d.1).sum::<usize>();
            let mut data = Vec::with_capacity(r * cols);
            for row in 0..r {
                for (&i, d) in idx.iter().zip(&dims) {
                    data.extend_from_slice(&self.val(i).data()[row * d.1..(row + 1) * d.1]);
                }
            }
            Tensor::new([r, cols], data)?
        };
        self.push("concat", value, Op::Concat { parts: idx.clone(), axis }, &idx)
    }

    /// Takes `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (r, c) = dims2("slice", self.val(xi).shape())?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(TensorError::InvalidAttr { op: "slice", detail: format!("axis {axis}") }),
        };
        if start + len > extent {
            return Err(mismatch("slice", format!("range {start}..{} of extent {extent}", start + len)));
        }
        let src = self.val(xi).data();
        let value = if axis == 0 {
            Tensor::new([len, c], src[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for row in 0..r {
                data.extend_from_slice(&src[row * c + start..row * c + start + len]);
            }
            Tensor::new([r, len], data)?
        };
        self.push("slice", value, Op::Slice { x: xi, axis, start }, &[xi])
    }

    /// Gathers rows of a `[V x E]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ti = self.idx(table)?;
        let (v, e) = dims2("embedding", self.val(ti).shape())?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(mismatch("embedding", format!("index {bad} out of range for {v} rows")));
        }
        let src = self.val(ti).data();
        let mut data = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            data.extend_from_slice(&src[i * e..(i + 1) * e]);
        }
        let value = Tensor::new([indices.len(), e], data)?;
        self.push("embedding", value, Op::Embedding { table: ti, indices: indices.to_vec() }, &[ti])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.norm_impl("layer_norm", x, gamma, beta, 1, eps)
    }

    /// Per-frame normalization over `groups` channel groups. Statistics never
    /// cross frames, so the op is causal.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        self.norm_impl("group_norm", x, gamma, beta, groups, eps)
    }

    fn norm_impl(&mut self, name: &'static str, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (_, c) = dims2(name, self.val(xi).shape())?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::InvalidAttr { op: name, detail: format!("{c} channels into {groups} groups") });
        }
        if self.val(gi).shape() != [c] || self.val(bi).shape() != [c] {
            return Err(mismatch(name, format!("affine params must be [{c}]")));
        }
        let (out, rstd) = k::group_norm(self.val(xi).data(), self.val(gi).data(), self.val(bi).data(), c, groups, eps);
        let value = Tensor::new(self.val(xi).shape().to_vec(), out)?;
        self.push(name, value, Op::Norm { x: xi, gamma: gi, beta: bi, groups, rstd }, &[xi, gi, bi])
    }

    fn rowwise(
        &mut self,
        name: &'static str,
        x: Var,
        f: fn(&[S], usize) -> Vec<S>,
        op: fn(usize) -> Op<S>,
    ) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.val(xi);
        let cols = *v.shape().last().unwrap_or(&1);
        let value = Tensor::new(v.shape().to_vec(), f(v.data(), cols))?;
        self.push(name, value, op(xi), &[xi])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise("softmax", x, k::softmax_rows, Op::Softmax)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise("log_softmax", x, k::log_softmax_rows, Op::LogSoftmax)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(S) -> S, op: fn(usize) -> Op<S>) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.val(xi);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        self.push(name, value, op(xi), &[xi])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, k::sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |a| a.tanh(), Op::Tanh)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary("swish", x, |a| a * k::sigmoid(a), Op::Swish)
    }

    /// Gated linear unit over the column halves of `[n x 2C]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (r, c2) = dims2("glu", self.val(xi).shape())?;
        if c2 % 2 != 0 {
            return Err(mismatch("glu", format!("odd column count {c2}")));
        }
        let c = c2 / 2;
        let src = self.val(xi).data();
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            let base = row * c2;
            for j in 0..c {
                data.push(src[base + j] * k::sigmoid(src[base + c + j]));
            }
        }
        let value = Tensor::new([r, c], data)?;
        self.push("glu", value, Op::Glu(xi), &[xi])
    }

    /// Depthwise convolution over time of `[T x C]` with a `[K x C]` kernel,
    /// where `K = left + right + 1`. Output frame `t` depends only on input
    /// frames `t - left ..= t + right`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, left: usize, right: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let (t, c) = dims2("depthwise_conv1d", self.val(xi).shape())?;
        let (kt, kc) = dims2("depthwise_conv1d", self.val(wi).shape())?;
        if kc != c || kt != left + right + 1 {
            return Err(mismatch(
                "depthwise_conv1d",
                format!("kernel {:?} for {c} channels with context ({left}, {right})", self.val(wi).shape()),
            ));
        }
        let out = k::depthwise_conv(self.val(xi).data(), self.val(wi).data(), t, c, left, right);
        let value = Tensor::new([t, c], out)?;
        self.push("depthwise_conv1d", value, Op::DepthwiseConv { x: xi, w: wi, left, right }, &[xi, wi])
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, x: Var, mask: Arc<[bool]>, fill: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.val(xi);
        if mask.len() != v.numel() {
            return Err(mismatch("masked_fill", format!("mask of {} for {} values", mask.len(), v.numel())));
        }
        let f = S::of(fill);
        let data = v.data().iter().zip(mask.iter()).map(|(&a, &m)| if m { f } else { a }).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push("masked_fill", value, Op::MaskedFill { x: xi, mask }, &[xi])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (r, c) = dims2("transpose", self.val(xi).shape())?;
        let src = self.val(xi).data();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], data)?;
        self.push("transpose", value, Op::Transpose(xi), &[xi])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.val(xi).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(xi), &[xi])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let total = self.val(xi).data().iter().copied().sum::<S>();
        self.push("sum", Tensor::scalar(total), Op::Sum(xi), &[xi])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.val(xi);
        if v.numel() == 0 {
            return Err(mismatch("mean", "mean of an empty tensor".into()));
        }
        let total = v.data().iter().copied().sum::<S>() / S::of(v.numel() as f64);
        self.push("mean", Tensor::scalar(total), Op::Mean(xi), &[xi])
    }

    /// Maps relative-position scores `[T x (2T-1)]`, whose column `c` holds
    /// key offset `c - (T-1)`, to absolute `[T x T]` scores.
    pub fn rel_shift(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (t, w) = dims2("rel_shift", self.val(xi).shape())?;
        if w != (2 * t).saturating_sub(1) {
            return Err(mismatch("rel_shift", format!("expected [{t} x {}], got {w} columns", 2 * t - 1)));
        }
        let src = self.val(xi).data();
        let mut data = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                data.push(src[i * w + j + t - 1 - i]);
            }
        }
        let value = Tensor::new([t, t], data)?;
        self.push("rel_shift", value, Op::RelShift(xi), &[xi])
    }

    /// Negative log-likelihood of `targets` under a HAT logit lattice of shape
    /// `[(frames * (U+1)) x (V+1)]`, row `t*(U+1)+u`, column 0 = blank.
    pub fn transducer_loss(&mut self, logits: Var, targets: &[usize], frames: usize) -> Result<Var> {
        let li = self.idx(logits)?;
        let (rows, width) = dims2("transducer_loss", self.val(li).shape())?;
        let labels = targets.len();
        if frames == 0 && labels > 0 {
            return Err(mismatch("transducer_loss", format!("{labels} targets cannot be emitted in zero frames")));
        }
        if rows != frames * (labels + 1) || width < 2 {
            return Err(mismatch("transducer_loss", format!("lattice [{rows} x {width}] for T={frames}, U={labels}")));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y + 1 >= width) {
            return Err(mismatch("transducer_loss", format!("target {bad} outside vocabulary of {}", width - 1)));
        }
        let nll = if frames == 0 {
            0.0
        } else {
            let (lb, ll) = k::hat_log_probs(self.val(li).data(), targets, frames, width);
            let alpha = k::transducer_alpha(&lb, &ll, frames, labels);
            let last = (frames - 1) * (labels + 1) + labels;
            -(alpha[last] + lb[last])
        };
        let value = Tensor::scalar(S::of(nll));
        self.push("transducer_loss", value, Op::Transducer { logits: li, targets: targets.to_vec(), frames }, &[li])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape and returns the
    /// gradient of every differentiable leaf that `loss` depends on.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let li = self.idx(loss)?;
        if self.val(li).numel() != 1 || !self.val(li).shape().is_empty() {
            return Err(TensorError::NotScalar(self.val(li).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![S::one()]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads: leaves })
    }

    fn take_grad(&self, grads: &mut [Option<Vec<S>>], i: usize) -> Option<Vec<S>> {
        self.nodes[i]
            .requires_grad
            .then(|| grads[i].take().unwrap_or_else(|| vec![S::zero(); self.nodes[i].value.numel()]))
    }

    fn give_grad(grads: &mut [Option<Vec<S>>], i: usize, buf: Option<Vec<S>>) {
        let Some(buf) = buf else { return };
        match &mut grads[i] {
            Some(existing) => {
                for (e, b) in existing.iter_mut().zip(buf) {
                    *e += b;
                }
            }
            slot @ None => *slot = Some(buf),
        }
    }

    /// Accumulates `f(buffer)` into the gradient of operand `i`.
    fn accumulate(&self, grads: &mut [Option<Vec<S>>], i: usize, f: impl FnOnce(&mut [S])) {
        if let Some(mut buf) = self.take_grad(grads, i) {
            f(&mut buf);
            Self::give_grad(grads, i, Some(buf));
        }
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, kk) = (self.val(a).rows(), self.val(a).cols());
                let n = if trans_b { self.val(b).rows() } else { self.val(b).cols() };
                let mut ga = self.take_grad(grads, a);
                let mut gb = self.take_grad(grads, b);
                k::matmul_backward(
                    g,
                    self.val(a).data(),
                    self.val(b).data(),
                    m,
                    kk,
                    n,
                    trans_b,
                    ga.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                Self::give_grad(grads, a, ga);
                Self::give_grad(grads, b, gb);
            }
            &Op::Add(a, b) => {
                for j in [a, b] {
                    self.accumulate(grads, j, |buf| buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv));
                }
            }
            &Op::AddBias { x, bias } => {
                self.accumulate(grads, x, |buf| buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv));
                let c = self.val(bias).numel();
                self.accumulate(grads, bias, |buf| {
                    if c > 0 {
                        for row in g.chunks_exact(c) {
                            buf.iter_mut().zip(row).for_each(|(o, &gv)| *o += gv);
                        }
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                self.accumulate(grads, a, |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(vb) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, b, |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(va) {
                        *o += gv * av;
                    }
                });
            }
            &Op::Scale { x, factor } => {
                self.accumulate(grads, x, |buf| buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv * factor));
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (self.val(p).rows(), self.val(p).cols());
                    let off = offset;
                    self.accumulate(grads, p, |buf| {
                        if *axis == 0 {
                            let src = &g[off * pc..(off + pr) * pc];
                            buf.iter_mut().zip(src).for_each(|(o, &gv)| *o += gv);
                        } else {
                            for r in 0..rows {
                                for c in 0..pc {
                                    buf[r * pc + c] += g[r * total_cols + off + c];
                                }
                            }
                        }
                    });
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            &Op::Slice { x, axis, start } => {
                let (r, c) = (self.val(x).rows(), self.val(x).cols());
                let len = if axis == 0 { node.value.rows() } else { node.value.cols() };
                self.accumulate(grads, x, |buf| {
                    if axis == 0 {
                        buf[start * c..(start + len) * c].iter_mut().zip(g).for_each(|(o, &gv)| *o += gv);
                    } else {
                        for row in 0..r {
                            for j in 0..len {
                                buf[row * c + start + j] += g[row * len + j];
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let e = self.val(*table).cols();
                self.accumulate(grads, *table, |buf| {
                    for (n, &ix) in indices.iter().enumerate() {
                        for j in 0..e {
                            buf[ix * e + j] += g[n * e + j];
                        }
                    }
                });
            }
            Op::Norm { x, gamma, beta, groups, rstd } => {
                let c = self.val(*x).cols();
                let mut gx = self.take_grad(grads, *x);
                let mut gg = self.take_grad(grads, *gamma);
                let mut gbt = self.take_grad(grads, *beta);
                k::group_norm_backward(
                    g,
                    self.val(*x).data(),
                    self.val(*gamma).data(),
                    rstd,
                    c,
                    *groups,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gbt.as_deref_mut(),
                );
                Self::give_grad(grads, *x, gx);
                Self::give_grad(grads, *gamma, gg);
                Self::give_grad(grads, *beta, gbt);
            }
            &Op::Softmax(x) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, x, |buf| k::softmax_backward(g, y, cols, buf));
            }
            &Op::LogSoftmax(x) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, x, |buf| k::log_softmax_backward(g, y, cols, buf));
            }
            &Op::Sigmoid(x) => {
                self.accumulate(grads, x, |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (S::one() - yv);
                    }
                });
            }
            &Op::Tanh(x) => {
                self.accumulate(grads, x, |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(y) {
                        *o += gv * (S::one() - yv * yv);
                    }
                });
            }
            &Op::Swish(x) => {
                let xv = self.val(x).data();
                self.accumulate(grads, x, |buf| {
                    for ((o, &gv), &a) in buf.iter_mut().zip(g).zip(xv) {
                        let s = k::sigmoid(a);
                        *o += gv * (s + a * s * (S::one() - s));
                    }
                });
            }
            &Op::Glu(x) => {
                let xv = self.val(x).data();
                let c = node.value.cols();
                let rows = node.value.rows();
                self.accumulate(grads, x, |buf| {
                    for r in 0..rows {
                        for j in 0..c {
                            let a = xv[r * 2 * c + j];
                            let s = k::sigmoid(xv[r * 2 * c + c + j]);
                            let gv = g[r * c + j];
                            buf[r * 2 * c + j] += gv * s;
                            buf[r * 2 * c + c + j] += gv * a * s * (S::one() - s);
                        }
                    }
                });
            }
            &Op::DepthwiseConv { x, w, left, right } => {
                let (t, c) = (self.val(x).rows(), self.val(x).cols());
                let mut gx = self.take_grad(grads, x);
                let mut gw = self.take_grad(grads, w);
                k::depthwise_conv_backward(
                    g,
                    self.val(x).data(),
                    self.val(w).data(),
                    t,
                    c,
                    left,
                    right,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                Self::give_grad(grads, x, gx);
                Self::give_grad(grads, w, gw);
            }
            Op::MaskedFill { x, mask } => {
                self.accumulate(grads, *x, |buf| {
                    for ((o, &gv), &m) in buf.iter_mut().zip(g).zip(mask.iter()) {
                        if !m {
                            *o += gv;
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.val(x).rows(), self.val(x).cols());
                self.accumulate(grads, x, |buf| {
                    for a in 0..r {
                        for b in 0..c {
                            buf[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            &Op::Reshape(x) => {
                self.accumulate(grads, x, |buf| buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv));
            }
            &Op::Sum(x) => {
                self.accumulate(grads, x, |buf| buf.iter_mut().for_each(|o| *o += g[0]));
            }
            &Op::Mean(x) => {
                let share = g[0] / S::of(self.val(x).numel() as f64);
                self.accumulate(grads, x, |buf| buf.iter_mut().for_each(|o| *o += share));
            }
            &Op::RelShift(x) => {
                let t = node.value.rows();
                let w = self.val(x).cols();
                self.accumulate(grads, x, |buf| {
                    for a in 0..t {
                        for b in 0..t {
                            buf[a * w + b + t - 1 - a] += g[a * t + b];
                        }
                    }
                });
            }
            Op::Transducer { logits, targets, frames } => {
                let width = self.val(*logits).cols();
                let data = self.val(*logits).data();
                self.accumulate(grads, *logits, |buf| {
                    k::transducer_backward(data, targets, *frames, width, g[0].as_f64(), buf)
                });
            }
        }
    }
}

/// Gradients of the differentiable leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients<S> {
    tape: u64,
    grads: HashMap<usize, Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of `leaf`; `None` when the loss does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&Tensor<S>> {
        if leaf.tape != self.tape {
            return None;
        }
        self.grads.get(&leaf.index)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor<S>> {
        if leaf.tape != self.tape {
            return None;
        }
        self.grads.remove(&leaf.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
