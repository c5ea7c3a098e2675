//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A [`Tape`] is a linear arena of nodes recorded during the forward pass and
//! replayed in reverse by [`Tape::backward`]. Handles ([`Value`]) are plain
//! indices, so tensors of intermediate results stay inside the tape; leaves
//! are copied in and gradients are read back out by handle or parameter name.
//!
//! Reductions (sum, mean, softmax denominators, norm statistics) accumulate
//! in 64-bit regardless of the tape's scalar type; everything else computes
//! in `T`. Tapes are not reused across iterations: build, run backward once,
//! drop.

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::TensorBase;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, f64),
    AddScalar(usize),
    /// Matrix plus a broadcast row vector.
    AddRow(usize, usize),
    /// Matrix times a broadcast row vector (elementwise per row).
    MulRow(usize, usize),
    /// Tensor scaled by a one-element node.
    ScaleByNode(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { axis: usize, parts: Vec<usize> },
    Slice { src: usize, axis: usize, start: usize },
    Softmax { src: usize, axis: usize },
    LogSoftmax { src: usize, axis: usize },
    LayerNorm { src: usize, gamma: usize, beta: usize, eps: f64 },
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    SqEuclidean(usize, usize),
    CrossEntropyMean { logits: usize, labels: Vec<usize>, smoothing: f64 },
}

struct Node<T: Real> {
    data: Vec<T>,
    shape: Vec<usize>,
    /// Lazily sized by `backward`; empty until then.
    grad: Vec<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    /// Named parameter leaves in binding order.
    params: Vec<(String, usize)>,
    /// Softmax nodes created through [`Tape::attention_softmax`].
    attn_probs: Vec<Value>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            attn_probs: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op, needs_grad: bool) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: Vec::new(),
            op,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Copies a tensor onto the tape; tracks gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &TensorBase<T>) -> Value {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Gradient-free leaf.
    pub fn constant(&mut self, t: &TensorBase<T>) -> Value {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> Value {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Named trainable leaf. The name is recorded so gradients can be
    /// exported per parameter and so tests can audit which parameters a
    /// pass touched.
    pub fn param(&mut self, name: &str, t: &TensorBase<T>) -> Value {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.push((name.to_string(), v.0));
        v
    }

    /// Cuts the gradient path: a constant leaf holding `v`'s current value.
    pub fn detach(&mut self, v: Value) -> Value {
        let data = self.nodes[v.0].data.clone();
        let shape = self.nodes[v.0].shape.clone();
        self.push(shape, data, Op::Leaf, false)
    }

    // ── Inspection ──────────────────────────────────────────────────────

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Value) -> TensorBase<T> {
        TensorBase::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is internally consistent")
    }

    pub fn item(&self, v: Value) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient buffer of a node, if backward has populated it.
    pub fn grad(&self, v: Value) -> Option<&[T]> {
        let g = &self.nodes[v.0].grad;
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    /// Names of all parameters bound to this tape, in binding order.
    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// `(name, gradient)` for every named parameter. Parameters untouched by
    /// the loss get a zero gradient of the right size.
    pub fn param_grads(&self) -> Vec<(String, Vec<T>)> {
        self.params
            .iter()
            .map(|(n, id)| {
                let node = &self.nodes[*id];
                let g = if node.grad.is_empty() {
                    vec![T::zero(); node.data.len()]
                } else {
                    node.grad.clone()
                };
                (n.clone(), g)
            })
            .collect()
    }

    pub fn attention_probs(&self) -> &[Value] {
        &self.attn_probs
    }

    // ── Elementwise / broadcast ops ─────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a.0, b.0), ng))
    }

    pub fn mul_scalar(&mut self, a: Value, c: T) -> Value {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let ng = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, Op::MulScalar(a.0, c.as_f64()), ng)
    }

    pub fn add_scalar(&mut self, a: Value, c: T) -> Value {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let ng = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, Op::AddScalar(a.0), ng)
    }

    /// `mat[r, c] + row[c]` for a rank-2 `mat` and a `[cols]` or `[1, cols]` row.
    pub fn add_row(&mut self, mat: Value, row: Value) -> Result<Value> {
        let (rows, cols) = self.as_matrix("add_row", mat)?;
        let rlen = self.nodes[row.0].data.len();
        if rlen != cols {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[mat.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let mut data = self.nodes[mat.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] + self.nodes[row.0].data[c];
            }
        }
        let ng = self.needs(mat.0) || self.needs(row.0);
        Ok(self.push(self.nodes[mat.0].shape.clone(), data, Op::AddRow(mat.0, row.0), ng))
    }

    /// `mat[r, c] * row[c]`.
    pub fn mul_row(&mut self, mat: Value, row: Value) -> Result<Value> {
        let (rows, cols) = self.as_matrix("mul_row", mat)?;
        if self.nodes[row.0].data.len() != cols {
            return Err(CoreError::ShapeMismatch {
                op: "mul_row",
                lhs: self.nodes[mat.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let mut data = self.nodes[mat.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] * self.nodes[row.0].data[c];
            }
        }
        let ng = self.needs(mat.0) || self.needs(row.0);
        Ok(self.push(self.nodes[mat.0].shape.clone(), data, Op::MulRow(mat.0, row.0), ng))
    }

    /// Scales `a` by a one-element node (gradient flows into both).
    pub fn scale_by_node(&mut self, a: Value, s: Value) -> Result<Value> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(CoreError::InvalidDimension {
                op: "scale_by_node",
                msg: format!("scale must be one element, got shape {:?}", self.nodes[s.0].shape),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x * sv).collect();
        let ng = self.needs(a.0) || self.needs(s.0);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::ScaleByNode(a.0, s.0), ng))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    fn as_matrix(&self, op: &'static str, v: Value) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(CoreError::InvalidDimension {
                op,
                msg: format!("expected rank-2 tensor, got shape {:?}", s),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, ka) = self.as_matrix("matmul", a)?;
        let (kb, n) = self.as_matrix("matmul", b)?;
        if ka != kb {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(vec![m, n], data, Op::Matmul(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.as_matrix("transpose", a)?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![T::zero(); src.len()];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(a.0);
        Ok(self.push(vec![n, m], data, Op::Transpose(a.0), ng))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    /// Same data, new shape (element counts must agree).
    pub fn reshape(&mut self, src: Value, shape: Vec<usize>) -> Result<Value> {
        let n: usize = shape.iter().product();
        if n != self.nodes[src.0].data.len() || shape.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidDimension {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.nodes[src.0].shape, shape),
            });
        }
        let data = self.nodes[src.0].data.clone();
        let ng = self.needs(src.0);
        Ok(self.push(shape, data, Op::Reshape(src.0), ng))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(CoreError::InvalidDimension {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        let base = self.nodes[parts[0].0].shape.clone();
        if axis >= base.len() {
            return Err(CoreError::InvalidDimension {
                op: "concat",
                msg: format!("axis {} out of range for rank {}", axis, base.len()),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let plen = self.nodes[p.0].shape[axis];
                let block = plen * inner;
                data.extend_from_slice(&self.nodes[p.0].data[o * block..(o + 1) * block]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        let parts_idx = parts.iter().map(|p| p.0).collect();
        Ok(self.push(shape, data, Op::Concat { axis, parts: parts_idx }, ng))
    }

    pub fn slice(&mut self, src: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let s = self.nodes[src.0].shape.clone();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(CoreError::InvalidDimension {
                op: "slice",
                msg: format!("range {}..{} on axis {} of shape {:?}", start, start + len, axis, s),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&self.nodes[src.0].data[base..base + len * inner]);
        }
        let ng = self.needs(src.0);
        Ok(self.push(shape, data, Op::Slice { src: src.0, axis, start }, ng))
    }

    /// Convenience: rows `[start, start+len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, src: Value, start: usize, len: usize) -> Result<Value> {
        self.slice(src, 0, start, len)
    }

    // ── Nonlinear ops ───────────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtraction, 64-bit
    /// denominator accumulation).
    pub fn softmax(&mut self, src: Value, axis: usize) -> Result<Value> {
        let s = self.nodes[src.0].shape.clone();
        if axis >= s.len() {
            return Err(CoreError::InvalidDimension {
                op: "softmax",
                msg: format!("axis {} out of range for rank {}", axis, s.len()),
            });
        }
        let data = softmax_lanes(&self.nodes[src.0].data, &s, axis, false);
        let ng = self.needs(src.0);
        Ok(self.push(s, data, Op::Softmax { src: src.0, axis }, ng))
    }

    /// Softmax recorded as an attention matrix for normalization audits.
    pub fn attention_softmax(&mut self, scores: Value) -> Result<Value> {
        let v = self.softmax(scores, 1)?;
        self.attn_probs.push(v);
        Ok(v)
    }

    pub fn log_softmax(&mut self, src: Value, axis: usize) -> Result<Value> {
        let s = self.nodes[src.0].shape.clone();
        if axis >= s.len() {
            return Err(CoreError::InvalidDimension {
                op: "log_softmax",
                msg: format!("axis {} out of range for rank {}", axis, s.len()),
            });
        }
        let data = softmax_lanes(&self.nodes[src.0].data, &s, axis, true);
        let ng = self.needs(src.0);
        Ok(self.push(s, data, Op::LogSoftmax { src: src.0, axis }, ng))
    }

    /// Layer normalization over the last dimension with affine transform.
    pub fn layer_norm(&mut self, src: Value, gamma: Value, beta: Value, eps: f64) -> Result<Value> {
        let s = self.nodes[src.0].shape.clone();
        let d = *s.last().ok_or(CoreError::InvalidDimension {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        if self.nodes[gamma.0].data.len() != d || self.nodes[beta.0].data.len() != d {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: s,
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(CoreError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let x = &self.nodes[src.0].data;
        let gam = &self.nodes[gamma.0].data;
        let bet = &self.nodes[beta.0].data;
        let rows = x.len() / d;
        let mut data = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let (mean, rstd) = row_moments(row, eps);
            for c in 0..d {
                let xh = (row[c].as_f64() - mean) * rstd;
                data[r * d + c] = T::from_f64(xh * gam[c].as_f64() + bet[c].as_f64());
            }
        }
        let ng = self.needs(src.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            self.nodes[src.0].shape.clone(),
            data,
            Op::LayerNorm { src: src.0, gamma: gamma.0, beta: beta.0, eps },
            ng,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Value) -> Value {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| T::from_f64(gelu_f64(x.as_f64()))).collect();
        let ng = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Gelu(a.0), ng)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let ng = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Exp(a.0), ng)
    }

    pub fn log(&mut self, a: Value) -> Value {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let ng = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Log(a.0), ng)
    }

    /// `ln(1 + exp(x))` computed through the overflow-safe `log1p` identity.
    pub fn softplus(&mut self, a: Value) -> Value {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| T::from_f64(softplus_f64(x.as_f64()))).collect();
        let ng = self.needs(a.0);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Softplus(a.0), ng)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Value) -> Value {
        let acc: f64 = self.nodes[a.0].data.iter().map(|v| v.as_f64()).sum();
        let ng = self.needs(a.0);
        self.push(vec![1], vec![T::from_f64(acc)], Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let n = self.nodes[a.0].data.len();
        let acc: f64 = self.nodes[a.0].data.iter().map(|v| v.as_f64()).sum();
        let ng = self.needs(a.0);
        self.push(vec![1], vec![T::from_f64(acc / n as f64)], Op::Mean(a.0), ng)
    }

    /// Squared Euclidean distance between equally-shaped tensors.
    pub fn sq_euclidean(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_same_shape("sq_euclidean", a, b)?;
        let mut acc = 0f64;
        for (x, y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            let d = x.as_f64() - y.as_f64();
            acc += d * d;
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(vec![1], vec![T::from_f64(acc)], Op::SqEuclidean(a.0, b.0), ng))
    }

    /// Mean cross-entropy of logits against integer labels, with optional
    /// label smoothing. Log-probabilities use max-subtracted 64-bit
    /// accumulation.
    pub fn cross_entropy_mean(&mut self, logits: Value, labels: &[usize], smoothing: f64) -> Result<Value> {
        let (rows, classes) = self.as_matrix("cross_entropy_mean", logits)?;
        if labels.len() != rows {
            return Err(CoreError::Batch(format!(
                "{} labels for {} logit rows",
                labels.len(),
                rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(CoreError::Batch(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let x = &self.nodes[logits.0].data;
        let mut total = 0f64;
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let logp = log_softmax_row(row);
            let mut row_loss = -(1.0 - smoothing) * logp[labels[r]];
            if smoothing > 0.0 {
                let mean_logp: f64 = logp.iter().sum::<f64>() / classes as f64;
                row_loss -= smoothing * mean_logp;
            }
            total += row_loss;
        }
        let ng = self.needs(logits.0);
        Ok(self.push(
            vec![1],
            vec![T::from_f64(total / rows as f64)],
            Op::CrossEntropyMean { logits: logits.0, labels: labels.to_vec(), smoothing },
            ng,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn ensure_grad(&mut self, id: usize) {
        if self.nodes[id].grad.is_empty() {
            self.nodes[id].grad = vec![T::zero(); self.nodes[id].data.len()];
        }
    }

    fn acc(&mut self, id: usize, contrib: &[T]) {
        if !self.needs(id) {
            return;
        }
        self.ensure_grad(id);
        for (g, c) in self.nodes[id].grad.iter_mut().zip(contrib) {
            *g = *g + *c;
        }
    }

    fn acc_scaled(&mut self, id: usize, contrib: &[T], scale: T) {
        if !self.needs(id) {
            return;
        }
        self.ensure_grad(id);
        for (g, c) in self.nodes[id].grad.iter_mut().zip(contrib) {
            *g = *g + *c * scale;
        }
    }

    /// Propagates gradients from a scalar node back to every reachable
    /// gradient-tracked leaf.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(CoreError::InvalidDimension {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing reachable requires grad
        }
        self.ensure_grad(loss.0);
        self.nodes[loss.0].grad[0] = T::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_empty() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = std::mem::take(&mut self.nodes[i].grad);
            self.backprop_node(i, &op, &g);
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, op: &Op, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                self.acc(a, g);
                self.acc_scaled(b, g, T::from_f64(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da = zip_map(g, &self.nodes[b].data, |gv, bv| gv * bv);
                    self.acc(a, &da);
                }
                if self.needs(b) {
                    let db = zip_map(g, &self.nodes[a].data, |gv, av| gv * av);
                    self.acc(b, &db);
                }
            }
            Op::MulScalar(a, c) => self.acc_scaled(a, g, T::from_f64(c)),
            Op::AddScalar(a) => self.acc(a, g),
            Op::AddRow(mat, row) => {
                self.acc(mat, g);
                if self.needs(row) {
                    let cols = self.nodes[row].data.len();
                    let mut dr = vec![0f64; cols];
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % cols] += gv.as_f64();
                    }
                    let dr: Vec<T> = dr.into_iter().map(T::from_f64).collect();
                    self.acc(row, &dr);
                }
            }
            Op::MulRow(mat, row) => {
                let cols = self.nodes[row].data.len();
                if self.needs(mat) {
                    let rowv = &self.nodes[row].data;
                    let dm: Vec<T> = g.iter().enumerate().map(|(i, gv)| *gv * rowv[i % cols]).collect();
                    self.acc(mat, &dm);
                }
                if self.needs(row) {
                    let matv = &self.nodes[mat].data;
                    let mut dr = vec![0f64; cols];
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % cols] += gv.as_f64() * matv[i].as_f64();
                    }
                    let dr: Vec<T> = dr.into_iter().map(T::from_f64).collect();
                    self.acc(row, &dr);
                }
            }
            Op::ScaleByNode(a, s) => {
                let sv = self.nodes[s].data[0];
                self.acc_scaled(a, g, sv);
                if self.needs(s) {
                    let av = &self.nodes[a].data;
                    let ds: f64 = g.iter().zip(av).map(|(gv, x)| gv.as_f64() * x.as_f64()).sum();
                    self.acc(s, &[T::from_f64(ds)]);
                }
            }
            Op::Matmul(a, b) => {
                let m = self.nodes[a].shape[0];
                let k = self.nodes[a].shape[1];
                let n = self.nodes[b].shape[1];
                if self.needs(a) {
                    // da = g . b^T
                    let da = matmul_nt(g, &self.nodes[b].data, m, n, k);
                    self.acc(a, &da);
                }
                if self.needs(b) {
                    // db = a^T . g
                    let db = matmul_tn(&self.nodes[a].data, g, m, k, n);
                    self.acc(b, &db);
                }
            }
            Op::Transpose(a) => {
                let m = self.nodes[a].shape[0];
                let n = self.nodes[a].shape[1];
                let mut da = vec![T::zero(); g.len()];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.acc(a, &da);
            }
            Op::Reshape(a) => self.acc(a, g),
            Op::Concat { axis, ref parts } => {
                let shape = &self.nodes[id].shape;
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_axis = shape[axis];
                let mut offset = 0;
                for &p in parts {
                    let plen = self.nodes[p].shape[axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(plen * inner * outer);
                        for o in 0..outer {
                            let base = (o * total_axis + offset) * inner;
                            dp.extend_from_slice(&g[base..base + plen * inner]);
                        }
                        self.acc(p, &dp);
                    }
                    offset += plen;
                }
            }
            Op::Slice { src, axis, start } => {
                if self.needs(src) {
                    let sshape = self.nodes[src].shape.clone();
                    let outer: usize = sshape[..axis].iter().product();
                    let inner: usize = sshape[axis + 1..].iter().product();
                    let len = self.nodes[id].shape[axis];
                    self.ensure_grad(src);
                    for o in 0..outer {
                        let dst_base = (o * sshape[axis] + start) * inner;
                        let src_base = o * len * inner;
                        for j in 0..len * inner {
                            let cur = self.nodes[src].grad[dst_base + j];
                            self.nodes[src].grad[dst_base + j] = cur + g[src_base + j];
                        }
                    }
                }
            }
            Op::Softmax { src, axis } => {
                if self.needs(src) {
                    let y = &self.nodes[id].data;
                    let shape = &self.nodes[id].shape;
                    let dx = softmax_backward(y, g, shape, axis);
                    self.acc(src, &dx);
                }
            }
            Op::LogSoftmax { src, axis } => {
                if self.needs(src) {
                    let y = &self.nodes[id].data; // log-probabilities
                    let shape = &self.nodes[id].shape;
                    let dx = log_softmax_backward(y, g, shape, axis);
                    self.acc(src, &dx);
                }
            }
            Op::LayerNorm { src, gamma, beta, eps } => {
                let d = *self.nodes[id].shape.last().unwrap();
                let rows = g.len() / d;
                let x = &self.nodes[src].data;
                let gam = &self.nodes[gamma].data;
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![0f64; d];
                let mut dbeta = vec![0f64; d];
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = row_moments(row, eps);
                    // gh = g * gamma; means over the row in 64-bit
                    let mut mean_gh = 0f64;
                    let mut mean_gh_xh = 0f64;
                    let mut xh = vec![0f64; d];
                    let mut gh = vec![0f64; d];
                    for c in 0..d {
                        xh[c] = (row[c].as_f64() - mean) * rstd;
                        gh[c] = grow[c].as_f64() * gam[c].as_f64();
                        mean_gh += gh[c];
                        mean_gh_xh += gh[c] * xh[c];
                        dgamma[c] += grow[c].as_f64() * xh[c];
                        dbeta[c] += grow[c].as_f64();
                    }
                    mean_gh /= d as f64;
                    mean_gh_xh /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = T::from_f64((gh[c] - mean_gh - xh[c] * mean_gh_xh) * rstd);
                    }
                }
                self.acc(src, &dx);
                if self.needs(gamma) {
                    let dg: Vec<T> = dgamma.into_iter().map(T::from_f64).collect();
                    self.acc(gamma, &dg);
                }
                if self.needs(beta) {
                    let db: Vec<T> = dbeta.into_iter().map(T::from_f64).collect();
                    self.acc(beta, &db);
                }
            }
            Op::Gelu(a) => {
                if self.needs(a) {
                    let da: Vec<T> = self.nodes[a]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| T::from_f64(gelu_grad_f64(x.as_f64()) * gv.as_f64()))
                        .collect();
                    self.acc(a, &da);
                }
            }
            Op::Exp(a) => {
                if self.needs(a) {
                    let da = zip_map(g, &self.nodes[id].data, |gv, y| gv * y);
                    self.acc(a, &da);
                }
            }
            Op::Log(a) => {
                if self.needs(a) {
                    let da = zip_map(g, &self.nodes[a].data, |gv, x| gv / x);
                    self.acc(a, &da);
                }
            }
            Op::Softplus(a) => {
                if self.needs(a) {
                    let da: Vec<T> = self.nodes[a]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| {
                            let sig = 1.0 / (1.0 + (-x.as_f64()).exp());
                            T::from_f64(sig * gv.as_f64())
                        })
                        .collect();
                    self.acc(a, &da);
                }
            }
            Op::Sum(a) => {
                if self.needs(a) {
                    let gv = g[0];
                    let da = vec![gv; self.nodes[a].data.len()];
                    self.acc(a, &da);
                }
            }
            Op::Mean(a) => {
                if self.needs(a) {
                    let n = self.nodes[a].data.len();
                    let gv = g[0] * T::from_f64(1.0 / n as f64);
                    let da = vec![gv; n];
                    self.acc(a, &da);
                }
            }
            Op::SqEuclidean(a, b) => {
                let gv = g[0].as_f64();
                if self.needs(a) || self.needs(b) {
                    let diff: Vec<T> = self.nodes[a]
                        .data
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(&x, &y)| T::from_f64(2.0 * gv * (x.as_f64() - y.as_f64())))
                        .collect();
                    self.acc(a, &diff);
                    self.acc_scaled(b, &diff, T::from_f64(-1.0));
                }
            }
            Op::CrossEntropyMean { logits, ref labels, smoothing } => {
                if self.needs(logits) {
                    let rows = labels.len();
                    let classes = self.nodes[logits].shape[1];
                    let x = &self.nodes[logits].data;
                    let gv = g[0].as_f64() / rows as f64;
                    let mut dx = vec![T::zero(); x.len()];
                    for r in 0..rows {
                        let row = &x[r * classes..(r + 1) * classes];
                        let logp = log_softmax_row(row);
                        for c in 0..classes {
                            let p = logp[c].exp();
                            let mut target = smoothing / classes as f64;
                            if c == labels[r] {
                                target += 1.0 - smoothing;
                            }
                            dx[r * classes + c] = T::from_f64(gv * (p - target));
                        }
                    }
                    self.acc(logits, &dx);
                }
            }
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

// The matmul kernels accumulate in f64 like every other reduction. Besides
// tightening oracle tolerances, this makes contractions over concatenated
// key rows insensitive (at f32 output precision) to the order the rows were
// stacked in, which the X-layer's permutation-invariance contract relies on.

/// `a[m×k] . b[k×n]`.
pub(crate) fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut acc = vec![0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut acc[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j].as_f64();
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// `a[m×n] . b[k×n]^T -> [m×k]`.
fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0f64;
            let arow = &a[i * n..(i + 1) * n];
            let brow = &b[j * n..(j + 1) * n];
            for p in 0..n {
                acc += arow[p].as_f64() * brow[p].as_f64();
            }
            out[i * k + j] = T::from_f64(acc);
        }
    }
    out
}

/// `a[m×k]^T . b[m×n] -> [k×n]`.
fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut acc = vec![0f64; k * n];
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i].as_f64();
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut acc[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j].as_f64();
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// Iterates `(base, stride, len)` lanes along `axis` of a row-major tensor.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

fn softmax_lanes<T: Real>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let len = shape[axis];
    let mut out = vec![T::zero(); x.len()];
    for_each_lane(shape, axis, |base, stride| {
        let mut maxv = f64::NEG_INFINITY;
        for j in 0..len {
            maxv = maxv.max(x[base + j * stride].as_f64());
        }
        let mut denom = 0f64;
        for j in 0..len {
            denom += (x[base + j * stride].as_f64() - maxv).exp();
        }
        if log {
            let lse = maxv + denom.ln();
            for j in 0..len {
                out[base + j * stride] = T::from_f64(x[base + j * stride].as_f64() - lse);
            }
        } else {
            for j in 0..len {
                out[base + j * stride] =
                    T::from_f64((x[base + j * stride].as_f64() - maxv).exp() / denom);
            }
        }
    });
    out
}

fn softmax_backward<T: Real>(y: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let len = shape[axis];
    let mut dx = vec![T::zero(); y.len()];
    for_each_lane(shape, axis, |base, stride| {
        let mut dot = 0f64;
        for j in 0..len {
            dot += g[base + j * stride].as_f64() * y[base + j * stride].as_f64();
        }
        for j in 0..len {
            let idx = base + j * stride;
            dx[idx] = T::from_f64(y[idx].as_f64() * (g[idx].as_f64() - dot));
        }
    });
    dx
}

fn log_softmax_backward<T: Real>(logp: &[T], g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let len = shape[axis];
    let mut dx = vec![T::zero(); logp.len()];
    for_each_lane(shape, axis, |base, stride| {
        let mut gsum = 0f64;
        for j in 0..len {
            gsum += g[base + j * stride].as_f64();
        }
        for j in 0..len {
            let idx = base + j * stride;
            let p = logp[idx].as_f64().exp();
            dx[idx] = T::from_f64(g[idx].as_f64() - p * gsum);
        }
    });
    dx
}

/// 64-bit mean and reciprocal standard deviation of one row.
fn row_moments<T: Real>(row: &[T], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean: f64 = row.iter().map(|v| v.as_f64()).sum::<f64>() / d;
    let var: f64 = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Max-subtracted 64-bit log-softmax of one row.
pub(crate) fn log_softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let maxv = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|v| (v.as_f64() - maxv).exp()).sum();
    let lse = maxv + denom.ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}

pub(crate) fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

pub(crate) fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
