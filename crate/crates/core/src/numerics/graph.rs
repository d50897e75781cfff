//! Reverse-mode autodiff on a tape of recorded operations.
//!
//! A [`Graph`] owns every intermediate tensor produced during a forward pass.
//! Callers register leaves (constants and named parameters), build the
//! computation through the op methods, and call [`Graph::backward`] on a
//! scalar loss to obtain gradients for all reachable parameters. Node indices
//! are handed out in topological order, so one reverse sweep visits each node
//! exactly once. Every op validates operand shapes and checks its output for
//! non-finite values; failures surface as structured errors instead of
//! propagating NaN into training.

use std::collections::BTreeMap;

use super::scalar::Scalar;
use super::tensor::{matmul_kernel, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Transpose(Var, usize, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { input: Var, gamma: Var, beta: Var },
    Gelu(Var),
    Relu(Var),
    L2Normalize(Var),
    Exp(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    Embedding { table: Var, ids: Vec<u32> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `var`, if any flowed there.
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// Tape of recorded tensor operations; see the module docs.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `var`.
    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    /// Registers a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.check_finite("constant", &value)?;
        Ok(self.push(value, Op::Leaf, false, None))
    }

    /// Registers a named parameter leaf that accumulates gradient.
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Result<Var> {
        self.check_finite("param", &value)?;
        Ok(self.push(value, Op::Leaf, true, Some(name.to_string())))
    }

    /// Registers an input leaf that accumulates gradient but has no name;
    /// used by the finite-difference checks to differentiate with respect to
    /// activations.
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        self.check_finite("input", &value)?;
        Ok(self.push(value, Op::Leaf, true, None))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, name });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        self.check_finite(op_name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad, None))
    }

    fn check_finite(&self, op: &str, value: &Tensor<S>) -> Result<()> {
        if value.all_finite() {
            Ok(())
        } else {
            Err(Error::domain(op, "non-finite value in output"))
        }
    }

    // ── Binary and unary elementwise ops ────────────────────────────────

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.record("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.record("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a rank-1 bias to every row of `x` (last axis must match).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap();
        if tb.ndim() != 1 || tb.shape()[0] != d {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match last extent of {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(d) {
            data.extend(row.iter().zip(tb.data()).map(|(&x, &b)| x + b));
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.record("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    /// Multiplies every element by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.record("scale", value, Op::Scale(x, c), &[x])
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.record("exp", value, Op::Exp(x), &[x])
    }

    /// Elementwise natural log; any non-positive input is a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= S::ZERO) {
            return Err(Error::domain("log", "input must be strictly positive"));
        }
        let value = self.value(x).map(|v| v.ln());
        self.record("log", value, Op::Log(x), &[x])
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_forward);
        self.record("gelu", value, Op::Gelu(x), &[x])
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(S::ZERO));
        self.record("relu", value, Op::Relu(x), &[x])
    }

    // ── Matrix product ──────────────────────────────────────────────────

    /// Matrix product of the trailing two axes. Both operands must be rank 2,
    /// or have identical leading (batch) extents; there is no broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![S::ZERO; batch * m * n];
        for bi in 0..batch {
            matmul_kernel(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        self.record("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let tx = self.value(x);
        let nd = tx.ndim();
        if ax1 >= nd || ax2 >= nd {
            return Err(Error::shape("transpose", format!("axes ({ax1},{ax2}) out of range for {:?}", tx.shape())));
        }
        let value = transpose_copy(tx, ax1, ax2)?;
        self.record("transpose", value, Op::Transpose(x, ax1, ax2), &[x])
    }

    /// Reinterprets the row-major data under a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} elements) to {shape:?} ({numel})", tx.shape(), tx.numel()),
            ));
        }
        let value = Tensor::new(shape.to_vec(), tx.data().to_vec())?;
        self.record("reshape", value, Op::Reshape(x), &[x])
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.record("concat", value, Op::Concat(inputs.to_vec(), axis), inputs)
    }

    /// Takes `len` consecutive entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let block = s[axis] * inner;
        let mut shape = s.to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * block + start * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let value = Tensor::new(shape, data)?;
        self.record("slice", value, Op::Slice { input: x, axis, start }, &[x])
    }

    // ── Row-structured ops (last axis) ──────────────────────────────────

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(d) {
            let m = row.iter().copied().fold(row[0], S::max);
            let exps: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: S = exps.iter().copied().sum();
            data.extend(exps.iter().map(|&e| e / z));
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.record("softmax", value, Op::Softmax(x), &[x])
    }

    /// Numerically stabilized log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(d) {
            let m = row.iter().copied().fold(row[0], S::max);
            let z: S = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln();
            data.extend(row.iter().map(|&v| v - m - log_z));
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.record("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape().last().unwrap();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?} / beta {:?} must be [{d}]", tg.shape(), tb.shape()),
            ));
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let inv_d = S::ONE / S::from_usize(d);
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(d) {
            let mean: S = row.iter().copied().sum::<S>() * inv_d;
            let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let inv_std = S::ONE / (var + eps).sqrt();
            for ((&v, &g), &b) in row.iter().zip(tg.data()).zip(tb.data()) {
                data.push((v - mean) * inv_std * g + b);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.record("layer_norm", value, Op::LayerNorm { input: x, gamma, beta }, &[x, gamma, beta])
    }

    /// Scales each last-axis row to unit Euclidean norm; a (near-)zero row is
    /// a domain error rather than a division by zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let eps = S::from_f64(L2_NORM_EPS);
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(d) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm <= eps {
                return Err(Error::domain("l2_normalize", "zero-norm row"));
            }
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.record("l2_normalize", value, Op::L2Normalize(x), &[x])
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let v = tx.data().iter().copied().sum::<S>() / S::from_usize(tx.numel());
        self.record("mean", Tensor::scalar(v), Op::Mean(x), &[x])
    }

    /// Sum over all elements, producing a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let v = tx.data().iter().copied().sum::<S>();
        self.record("sum", Tensor::scalar(v), Op::Sum(x), &[x])
    }

    // ── Lookup ──────────────────────────────────────────────────────────

    /// Gathers rows of an embedding table: `ids` of shape `ids_shape` produce
    /// an output of shape `ids_shape x D`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], ids_shape: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.ndim() != 2 {
            return Err(Error::shape("embedding", format!("table must be rank 2, got {:?}", tt.shape())));
        }
        let expected: usize = ids_shape.iter().product();
        if expected != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("ids_shape {ids_shape:?} implies {expected} ids, got {}", ids.len()),
            ));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::contract(format!("embedding id {id} out of range for table of {v} rows")));
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        self.record("embedding", value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every node the
    /// loss depends on; leaves that require grad but are unreachable simply
    /// have no entry (their gradient is zero).
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::ONE));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            if !dy.all_finite() {
                return Err(Error::domain("backward", "non-finite gradient"));
            }
            self.apply_vjp(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Collects gradients of all named parameter leaves into a name-keyed map.
    /// Named leaves the loss never touched get explicit zero gradients.
    pub fn named_gradients(&self, grads: &Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let g = grads
                    .grads
                    .get(idx)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                map.insert(name.clone(), g);
            }
        }
        map
    }

    fn apply_vjp(&self, idx: usize, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let needs = |g: &Graph<S>, v: Var| g.nodes[v.0].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(self, *a) {
                    accumulate(grads, *a, dy.clone());
                }
                if needs(self, *b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Mul(a, b) => {
                if needs(self, *a) {
                    accumulate(grads, *a, elementwise(dy, self.value(*b), |g, v| g * v));
                }
                if needs(self, *b) {
                    accumulate(grads, *b, elementwise(dy, self.value(*a), |g, v| g * v));
                }
            }
            Op::AddBias(x, bias) => {
                if needs(self, *x) {
                    accumulate(grads, *x, dy.clone());
                }
                if needs(self, *bias) {
                    let d = self.value(*bias).shape()[0];
                    let mut acc = vec![S::ZERO; d];
                    for row in dy.data().chunks_exact(d) {
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    accumulate(grads, *bias, Tensor::new(vec![d], acc)?);
                }
            }
            Op::Scale(x, c) => {
                if needs(self, *x) {
                    accumulate(grads, *x, dy.map(|g| g * *c));
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sa = ta.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = *tb.shape().last().unwrap();
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if needs(self, *a) {
                    let mut da = vec![S::ZERO; ta.numel()];
                    for bi in 0..batch {
                        matmul_nt(
                            &dy.data()[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, Tensor::new(sa.to_vec(), da)?);
                }
                if needs(self, *b) {
                    let mut db = vec![S::ZERO; tb.numel()];
                    for bi in 0..batch {
                        matmul_tn(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &dy.data()[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Transpose(x, ax1, ax2) => {
                if needs(self, *x) {
                    accumulate(grads, *x, transpose_copy(dy, *ax1, *ax2)?);
                }
            }
            Op::Reshape(x) => {
                if needs(self, *x) {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, Tensor::new(shape, dy.data().to_vec())?);
                }
            }
            Op::Concat(inputs, axis) => {
                let first = self.value(inputs[0]).shape();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let total_block: usize = dy.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let block = t.shape()[*axis] * inner;
                    if needs(self, v) {
                        let mut part = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = o * total_block + offset;
                            part.extend_from_slice(&dy.data()[base..base + block]);
                        }
                        accumulate(grads, v, Tensor::new(t.shape().to_vec(), part)?);
                    }
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                if needs(self, *input) {
                    let t = self.value(*input);
                    let s = t.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    let block = s[*axis] * inner;
                    let len = dy.shape()[*axis];
                    let mut dx = vec![S::ZERO; t.numel()];
                    for o in 0..outer {
                        let dst = o * block + start * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&dy.data()[src..src + len * inner]);
                    }
                    accumulate(grads, *input, Tensor::new(s.to_vec(), dx)?);
                }
            }
            Op::Softmax(x) => {
                if needs(self, *x) {
                    let y = &self.nodes[idx].value;
                    let d = *y.shape().last().unwrap();
                    let mut dx = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)) {
                        let dot: S = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                    }
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::LogSoftmax(x) => {
                if needs(self, *x) {
                    let y = &self.nodes[idx].value;
                    let d = *y.shape().last().unwrap();
                    let mut dx = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)) {
                        let gsum: S = gr.iter().copied().sum();
                        dx.extend(yr.iter().zip(gr).map(|(&y, &g)| g - y.exp() * gsum));
                    }
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::LayerNorm { input, gamma, beta } => {
                let (tx, tg) = (self.value(*input), self.value(*gamma));
                let d = *tx.shape().last().unwrap();
                let rows = tx.numel() / d;
                let eps = S::from_f64(LAYER_NORM_EPS);
                let inv_d = S::ONE / S::from_usize(d);
                let mut dx = vec![S::ZERO; tx.numel()];
                let mut dg = vec![S::ZERO; d];
                let mut db = vec![S::ZERO; d];
                for r in 0..rows {
                    let row = &tx.data()[r * d..(r + 1) * d];
                    let gr = &dy.data()[r * d..(r + 1) * d];
                    let mean: S = row.iter().copied().sum::<S>() * inv_d;
                    let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                    let inv_std = S::ONE / (var + eps).sqrt();
                    // dxh is the gradient on the normalized activations.
                    let xh: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxh: Vec<S> = gr.iter().zip(tg.data()).map(|(&g, &gm)| g * gm).collect();
                    let mean_dxh: S = dxh.iter().copied().sum::<S>() * inv_d;
                    let mean_dxh_xh: S = dxh.iter().zip(&xh).map(|(&a, &b)| a * b).sum::<S>() * inv_d;
                    for i in 0..d {
                        dx[r * d + i] = (dxh[i] - mean_dxh - xh[i] * mean_dxh_xh) * inv_std;
                        dg[i] += gr[i] * xh[i];
                        db[i] += gr[i];
                    }
                }
                if needs(self, *input) {
                    accumulate(grads, *input, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                if needs(self, *gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![d], dg)?);
                }
                if needs(self, *beta) {
                    accumulate(grads, *beta, Tensor::new(vec![d], db)?);
                }
            }
            Op::Gelu(x) => {
                if needs(self, *x) {
                    let tx = self.value(*x);
                    let dx: Vec<S> = tx.data().iter().zip(dy.data()).map(|(&v, &g)| g * gelu_derivative(v)).collect();
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
            }
            Op::Relu(x) => {
                if needs(self, *x) {
                    let tx = self.value(*x);
                    let dx: Vec<S> = tx
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > S::ZERO { g } else { S::ZERO })
                        .collect();
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
            }
            Op::L2Normalize(x) => {
                if needs(self, *x) {
                    let tx = self.value(*x);
                    let y = &self.nodes[idx].value;
                    let d = *tx.shape().last().unwrap();
                    let mut dx = Vec::with_capacity(tx.numel());
                    for (xr, (yr, gr)) in tx
                        .data()
                        .chunks_exact(d)
                        .zip(y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)))
                    {
                        let norm = xr.iter().map(|&v| v * v).sum::<S>().sqrt();
                        let dot: S = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&y, &g)| (g - y * dot) / norm));
                    }
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
            }
            Op::Exp(x) => {
                if needs(self, *x) {
                    let y = &self.nodes[idx].value;
                    let dx: Vec<S> = y.data().iter().zip(dy.data()).map(|(&y, &g)| g * y).collect();
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::Log(x) => {
                if needs(self, *x) {
                    let tx = self.value(*x);
                    let dx: Vec<S> = tx.data().iter().zip(dy.data()).map(|(&v, &g)| g / v).collect();
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
            }
            Op::Mean(x) => {
                if needs(self, *x) {
                    let tx = self.value(*x);
                    let g = dy.data()[0] / S::from_usize(tx.numel());
                    accumulate(grads, *x, Tensor::filled(tx.shape(), g));
                }
            }
            Op::Sum(x) => {
                if needs(self, *x) {
                    let tx = self.value(*x);
                    accumulate(grads, *x, Tensor::filled(tx.shape(), dy.data()[0]));
                }
            }
            Op::Embedding { table, ids } => {
                if needs(self, *table) {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let mut dt = vec![S::ZERO; tt.numel()];
                    for (pos, &id) in ids.iter().enumerate() {
                        let dst = id as usize * d;
                        let src = pos * d;
                        for i in 0..d {
                            dt[dst + i] += dy.data()[src + i];
                        }
                    }
                    accumulate(grads, *table, Tensor::new(tt.shape().to_vec(), dt)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], var: Var, delta: Tensor<S>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, &d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn elementwise<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same-shape elementwise")
}

/// out[m,k] += dy[m,n] . b[k,n]^T  (dot products over rows of both operands)
fn matmul_nt<S: Scalar>(dy: &[S], b: &[S], out: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let dy_row = &dy[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o += dy_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum::<S>();
        }
    }
}

/// out[k,n] += a[m,k]^T . dy[m,n]  (rank-1 updates keep the inner loop contiguous)
fn matmul_tn<S: Scalar>(a: &[S], dy: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let dy_row = &dy[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &g) in out_row.iter_mut().zip(dy_row) {
                *o += a_ip * g;
            }
        }
    }
}

fn transpose_copy<S: Scalar>(t: &Tensor<S>, ax1: usize, ax2: usize) -> Result<Tensor<S>> {
    let nd = t.ndim();
    let mut out_shape = t.shape().to_vec();
    out_shape.swap(ax1, ax2);
    if ax1 == ax2 {
        return Tensor::new(out_shape, t.data().to_vec());
    }
    // Strides of the input, permuted to walk in output order.
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape()[i + 1];
    }
    in_strides.swap(ax1, ax2);
    let mut data = Vec::with_capacity(t.numel());
    let mut index = vec![0usize; nd];
    let mut offset = 0usize;
    let src = t.data();
    for _ in 0..t.numel() {
        data.push(src[offset]);
        // Odometer increment over the output shape, tracking the input offset.
        for d in (0..nd).rev() {
            index[d] += 1;
            offset += in_strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            offset -= in_strides[d] * out_shape[d];
            index[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

fn gelu_forward<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let half = S::from_f64(0.5);
    let a = S::from_f64(0.044715);
    let u = c * (x + a * x.powi(3));
    half * x * (S::ONE + u.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let half = S::from_f64(0.5);
    let a = S::from_f64(0.044715);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x.powi(3));
    let t = u.tanh();
    let du = c * (S::ONE + three * a * x.powi(2));
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * du
}
