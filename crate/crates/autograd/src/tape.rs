//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node to the tape; node indices are therefore a
//! topological order and `backward` is a single reverse sweep. Parameters can
//! be borrowed into the tape without copying, so a frozen model can be
//! evaluated from several threads at once, each with its own tape.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: T },
    Concat { parts: Vec<(Var, usize)> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    BceLogits { logits: Var, targets: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss with respect to `v`. Present for every leaf that
    /// required grad (zeros when the loss does not depend on it).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Broadcast geometry of a binary elementwise op over 2-D operands.
#[derive(Clone, Copy)]
struct Bcast {
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Bcast {
    fn of(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        };
        let (&[ra, ca], &[rb, cb]) = (a, b) else {
            return Err(mismatch());
        };
        let join = |x: usize, y: usize| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        };
        let rows = join(ra, rb).ok_or_else(mismatch)?;
        let cols = join(ca, cb).ok_or_else(mismatch)?;
        Ok(Self {
            rows,
            cols,
            a: (ra, ca),
            b: (rb, cb),
        })
    }

    fn index(dims: (usize, usize), r: usize, c: usize) -> usize {
        let r = if dims.0 == 1 { 0 } else { r };
        let c = if dims.1 == 1 { 0 } else { c };
        r * dims.1 + c
    }

    fn apply<T: Scalar>(&self, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(f(a[Self::index(self.a, r, c)], b[Self::index(self.b, r, c)]));
            }
        }
        out
    }

    /// Sums an output-shaped gradient back down to an operand's shape.
    fn reduce<T: Scalar>(&self, dims: (usize, usize), g: &[T], scale: impl Fn(usize, usize) -> T) -> Tensor<T> {
        let mut out = vec![T::zero(); dims.0 * dims.1];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = Self::index(dims, r, c);
                out[i] = out[i] + g[r * self.cols + c] * scale(r, c);
            }
        }
        Tensor::new(&[dims.0, dims.1], out).expect("reduced shape is consistent")
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that records values only; nothing on it requires grad.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved backward state is useless when nothing upstream needs grad.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a borrowed leaf (typically a model parameter) without copying.
    pub fn borrowed(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    /// Matrix product `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b), ta, tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Bcast)> {
        let bc = Bcast::of(op, self.shape(a), self.shape(b))?;
        let data = bc.apply(self.value(a).data(), self.value(b).data(), f);
        Ok((Tensor::new(&[bc.rows, bc.cols], data)?, bc))
    }

    /// Elementwise sum; either operand may broadcast along an axis of size 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// `a · scale + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).map(|x| x * scale + shift);
        self.push(out, Op::Affine { a, scale }, &[a])
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Var {
        self.affine(a, scale, T::zero())
    }

    /// Concatenates along the last axis. All parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let rows = self.dims(first, "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, _) in &widths {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        Ok(self.push(out, Op::Concat { parts: widths }, parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a, "slice_cols")?;
        if start + len > cols {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                len: cols,
            });
        }
        let src = self.value(a);
        let data = (0..rows)
            .flat_map(|r| src.row_slice(r)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(&[rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { a, start }, &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(a, "slice_rows")?;
        if start + len > rows {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: rows,
            });
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(&[len, cols], data)?;
        Ok(self.push(out, Op::SliceRows { a, start }, &[a]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table, "gather")?;
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::OutOfRange {
                    op: "gather",
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(src.row_slice(id));
        }
        let out = Tensor::new(&[ids.len(), cols], data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Per-row normalization to zero mean and unit variance, followed by a
    /// `1×cols` gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.dims(a, "layer_norm")?;
        for p in [gain, bias] {
            if self.shape(p) != [1, cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(a).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let n = T::from_usize(cols).expect("column count fits the scalar type");
        let x = self.value(a);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = x.row_slice(r);
            let mean = row.iter().copied().fold(T::zero(), |s, v| s + v) / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |s, v| s + v) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let out = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(out, Op::LayerNorm { a, gain, bias, xhat, inv_std }, &[a, gain, bias]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis where `allow[i] == false` entries get
    /// probability exactly zero. A fully masked row yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, allow: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.dims(a, "softmax")?;
        if let Some(m) = allow {
            if m.len() != rows * cols {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    left: vec![rows, cols],
                    right: vec![m.len()],
                });
            }
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let ok = |c: usize| allow.is_none_or(|m| m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| ok(c))
                .map(|c| x[r * cols + c])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for c in 0..cols {
                if ok(c) {
                    let e = (x[r * cols + c] - max).exp();
                    out[r * cols + c] = e;
                    sum = sum + e;
                }
            }
            for o in &mut out[span] {
                *o = *o / sum;
            }
        }
        let out = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(out, Op::Softmax { a }, &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        self.push(out, Op::Tanh { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu { a }, &[a])
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(src.shape(), data).expect("same shape as input");
        self.push(out, Op::Dropout { a, mask }, &[a])
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// computed from the logits directly. Rows whose target is `None` are
    /// skipped; with no counted rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.dims(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![rows, cols],
                right: vec![targets.len()],
            });
        }
        let x = self.value(logits);
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = x.row_slice(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |s, v| s + v);
            let lse = max + sum.ln();
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
            if let Some(t) = *t {
                if t >= cols {
                    return Err(TensorError::OutOfRange {
                        op: "cross_entropy",
                        index: t,
                        len: cols,
                    });
                }
                total = total + (lse - row[t]);
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).expect("count fits")
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Binary cross-entropy between `sigmoid(logits)` and `targets`, averaged
    /// over all entries.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let x = self.value(logits);
        if targets.len() != x.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: x.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let total = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln())
            .fold(T::zero(), |s, v| s + v);
        let n = T::from_usize(targets.len().max(1)).expect("count fits");
        let op = Op::BceLogits {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / n), op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().fold(T::zero(), |s, v| s + v);
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_usize(v.len().max(1)).expect("count fits");
        let s = v.data().iter().copied().fold(T::zero(), |s, v| s + v) / n;
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape: a second call
    /// fails until the computation is recorded again on a fresh tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Grads { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let ga = if ta { bv.matmul(g, tb, true)? } else { g.matmul(bv, false, !tb)? };
                    accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let gb = if tb { g.matmul(av, true, ta)? } else { av.matmul(g, !ta, false)? };
                    accumulate(grads, b, gb);
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                let bc = Bcast::of("add", self.shape(a), self.shape(b))?;
                if self.needs(a) {
                    accumulate(grads, a, bc.reduce(bc.a, g.data(), |_, _| T::one()));
                }
                if self.needs(b) {
                    accumulate(grads, b, bc.reduce(bc.b, g.data(), |_, _| sign));
                }
            }
            &Op::Mul { a, b } => {
                let bc = Bcast::of("mul", self.shape(a), self.shape(b))?;
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    let grad = bc.reduce(bc.a, g.data(), |r, c| bv[Bcast::index(bc.b, r, c)]);
                    accumulate(grads, a, grad);
                }
                if self.needs(b) {
                    let grad = bc.reduce(bc.b, g.data(), |r, c| av[Bcast::index(bc.a, r, c)]);
                    accumulate(grads, b, grad);
                }
            }
            &Op::Affine { a, scale } => {
                accumulate(grads, a, g.map(|x| x * scale));
            }
            Op::Concat { parts } => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.needs(p) {
                        let data = (0..rows)
                            .flat_map(|r| g.data()[r * total + offset..r * total + offset + w].iter().copied())
                            .collect();
                        accumulate(grads, p, Tensor::new(&[rows, w], data)?);
                    }
                    offset += w;
                }
            }
            &Op::SliceCols { a, start } => {
                let (rows, cols) = self.dims(a, "slice_cols")?;
                let w = g.cols();
                let mut full = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    full.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row_slice(r));
                }
                accumulate(grads, a, full);
            }
            &Op::SliceRows { a, start } => {
                let (rows, cols) = self.dims(a, "slice_rows")?;
                let mut full = Tensor::zeros(&[rows, cols]);
                full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, a, full);
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = self.dims(*table, "gather")?;
                let mut full = Tensor::zeros(&[rows, cols]);
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut full.data_mut()[id * cols..(id + 1) * cols];
                    for (d, &s) in dst.iter_mut().zip(g.row_slice(i)) {
                        *d = *d + s;
                    }
                }
                accumulate(grads, *table, full);
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let (rows, cols) = (g.rows(), g.cols());
                let n = T::from_usize(cols).expect("fits");
                let gv = self.value(*gain).data();
                if self.needs(*a) {
                    let mut dx = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let gr = g.row_slice(r);
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let dxhat: Vec<T> = gr.iter().zip(gv).map(|(&d, &w)| d * w).collect();
                        let s1 = dxhat.iter().copied().fold(T::zero(), |s, v| s + v);
                        let s2 = dxhat.iter().zip(xr).map(|(&d, &h)| d * h).fold(T::zero(), |s, v| s + v);
                        for c in 0..cols {
                            dx.push(inv_std[r] / n * (n * dxhat[c] - s1 - xr[c] * s2));
                        }
                    }
                    accumulate(grads, *a, Tensor::new(&[rows, cols], dx)?);
                }
                if self.needs(*gain) {
                    let mut dg = vec![T::zero(); cols];
                    for (i, (&d, &h)) in g.data().iter().zip(xhat).enumerate() {
                        dg[i % cols] = dg[i % cols] + d * h;
                    }
                    accumulate(grads, *gain, Tensor::new(&[1, cols], dg)?);
                }
                if self.needs(*bias) {
                    let mut db = vec![T::zero(); cols];
                    for (i, &d) in g.data().iter().enumerate() {
                        db[i % cols] = db[i % cols] + d;
                    }
                    accumulate(grads, *bias, Tensor::new(&[1, cols], db)?);
                }
            }
            &Op::Softmax { a } => {
                let (rows, cols) = (out.rows(), out.cols());
                let y = out.data();
                let mut dx = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot = g.data()[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .map(|(&d, &p)| d * p)
                        .fold(T::zero(), |s, v| s + v);
                    dx.extend(span.map(|i| y[i] * (g.data()[i] - dot)));
                }
                accumulate(grads, a, Tensor::new(&[rows, cols], dx)?);
            }
            &Op::Sigmoid { a } => {
                let dx = g.data().iter().zip(out.data()).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                accumulate(grads, a, Tensor::new(out.shape(), dx)?);
            }
            &Op::Tanh { a } => {
                let dx = g.data().iter().zip(out.data()).map(|(&d, &t)| d * (T::one() - t * t)).collect();
                accumulate(grads, a, Tensor::new(out.shape(), dx)?);
            }
            &Op::Relu { a } => {
                let x = self.value(a).data();
                let dx = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, a, Tensor::new(out.shape(), dx)?);
            }
            Op::Dropout { a, mask } => {
                let dx = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                accumulate(grads, *a, Tensor::new(out.shape(), dx)?);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let cols = self.value(*logits).cols();
                let mut dx = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = g.item() / T::from_usize(*count).expect("fits");
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..cols {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dx[r * cols + c] = (probs[r * cols + c] - onehot) * scale;
                        }
                    }
                }
                accumulate(grads, *logits, Tensor::new(self.shape(*logits), dx)?);
            }
            Op::BceLogits { logits, targets } => {
                let x = self.value(*logits);
                let scale = g.item() / T::from_usize(targets.len().max(1)).expect("fits");
                let dx = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&v, &t)| (sigmoid(v) - t) * scale)
                    .collect();
                accumulate(grads, *logits, Tensor::new(x.shape(), dx)?);
            }
            &Op::Sum { a } => {
                accumulate(grads, a, Tensor::full(self.shape(a), g.item()));
            }
            &Op::Mean { a } => {
                let n = T::from_usize(self.value(a).len().max(1)).expect("fits");
                accumulate(grads, a, Tensor::full(self.shape(a), g.item() / n));
            }
        }
        Ok(())
    }
}
