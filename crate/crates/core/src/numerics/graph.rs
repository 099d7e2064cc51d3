//! Define-by-run reverse-mode autodiff over [`Tensor`].
//!
//! Every operation records a node; [`Graph::backward`] walks the tape in
//! reverse creation order, touching each node once. Values are checked
//! finite as they are produced, so a diverging computation fails at the
//! first offending node with its label.

use std::collections::BTreeMap;

use super::tensor::{matmul_into, Tensor};
use super::NumericsError;
use crate::real::Real;

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Matmul(VarId, VarId),
    Add(VarId, VarId),
    AddRow(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    MaxElem(VarId, VarId),
    Scale(VarId, S),
    Transpose(VarId),
    ConcatRows(Vec<VarId>),
    SliceCols {
        src: VarId,
        start: usize,
        len: usize,
    },
    Relu(VarId),
    Softmax(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: S,
    },
    CrossEntropy {
        logits: VarId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    Gather {
        table: VarId,
        ids: Vec<usize>,
    },
    Sum(VarId),
    Detach,
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MaxElem(..) => "max",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Gather { .. } => "gather",
            Op::Sum(..) => "sum",
            Op::Detach => "detach",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    label: Option<String>,
}

/// Gradients of one backward pass, indexed by [`VarId`].
pub struct Gradients<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn grad(&self, id: VarId) -> Option<&Tensor<S>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }
}

/// Recorded computation. Confined to one logical thread; independent
/// graphs may run concurrently.
pub struct Graph<S: Real> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, VarId>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn label(&self, id: VarId) -> String {
        match &self.nodes[id.0].label {
            Some(l) => l.clone(),
            None => format!("{}#{}", self.nodes[id.0].op.name(), id.0),
        }
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn constant(&mut self, value: Tensor<S>) -> VarId {
        self.push_leaf(value, false, None)
    }

    /// Gradient-tracked unnamed leaf (grad-check inputs).
    pub fn input(&mut self, value: Tensor<S>) -> VarId {
        self.push_leaf(value, true, None)
    }

    /// Gradient-tracked named leaf (model parameters).
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> VarId {
        let id = self.push_leaf(value, true, Some(name.to_owned()));
        self.params.insert(name.to_owned(), id);
        id
    }

    pub fn param_ids(&self) -> &BTreeMap<String, VarId> {
        &self.params
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool, label: Option<String>) -> VarId {
        self.push_node(value, Op::Leaf, requires_grad, label)
    }

    fn push_node(
        &mut self,
        value: Tensor<S>,
        op: Op<S>,
        requires_grad: bool,
        label: Option<String>,
    ) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label,
        });
        VarId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<S>, op: Op<S>, parents: &[VarId]) -> Result<VarId, NumericsError> {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad)
            && !matches!(op, Op::Detach);
        if !value.is_all_finite() {
            return Err(NumericsError::NonFinite {
                label: format!("{}#{}", op.name(), self.nodes.len()),
            });
        }
        Ok(self.push_node(value, op, requires_grad, None))
    }

    fn require_same_shape(
        &self,
        op: &'static str,
        a: VarId,
        b: VarId,
    ) -> Result<(), NumericsError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_op(value, Op::Matmul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_same_shape("add", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    /// `(n, d) + (d,)`: the bias row is added to every row.
    pub fn add_row(&mut self, x: VarId, bias: VarId) -> Result<VarId, NumericsError> {
        let (_, d) = self.value(x).dims2()?;
        let bias_t = self.value(bias);
        if bias_t.rank() != 1 || bias_t.len() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: bias_t.shape().to_vec(),
            });
        }
        let (rows, _) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            for (o, &b) in row.iter_mut().zip(self.nodes[bias.0].value.data()) {
                *o = *o + b;
            }
        }
        self.push_op(out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_same_shape("sub", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push_op(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_same_shape("mul", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise max; the subgradient routes to the argmax input, ties
    /// to the first.
    pub fn max_elem(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.require_same_shape("max", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| if x >= y { x } else { y });
        self.push_op(value, Op::MaxElem(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: VarId, factor: S) -> Result<VarId, NumericsError> {
        let value = self.value(x).map(|v| v * factor);
        self.push_op(value, Op::Scale(x, factor), &[x])
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId, NumericsError> {
        let value = self.value(x).transposed2()?;
        self.push_op(value, Op::Transpose(x), &[x])
    }

    /// Concatenate 2-D blocks along the row (sequence) axis.
    pub fn concat_rows(&mut self, xs: &[VarId]) -> Result<VarId, NumericsError> {
        if xs.is_empty() {
            return Err(NumericsError::EmptyConcat);
        }
        let (_, cols) = self.value(xs[0]).dims2()?;
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.value(x).dims2()?;
            if c != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(xs[0]).shape().to_vec(),
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push_op(value, Op::ConcatRows(xs.to_vec()), xs)
    }

    /// Column slice `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId, NumericsError> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return Err(NumericsError::SliceOutOfRange {
                start,
                len,
                cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let row = self.value(x).row(r);
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        self.push_op(value, Op::SliceCols { src: x, start, len }, &[x])
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId, NumericsError> {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push_op(value, Op::Relu(x), &[x])
    }

    /// Row-wise softmax along the last axis, computed with max
    /// subtraction.
    pub fn softmax(&mut self, x: VarId) -> Result<VarId, NumericsError> {
        let (rows, cols) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            softmax_row(row);
        }
        self.push_op(out, Op::Softmax(x), &[x])
    }

    /// Softmax along an explicit axis of a 2-D tensor (axis 0 normalizes
    /// columns, axis 1 rows).
    pub fn softmax_axis(&mut self, x: VarId, axis: usize) -> Result<VarId, NumericsError> {
        match axis {
            1 => self.softmax(x),
            0 => {
                let t = self.transpose(x)?;
                let s = self.softmax(t)?;
                self.transpose(s)
            }
            _ => Err(NumericsError::BadAxis { axis }),
        }
    }

    /// Layer normalization along the last axis (population variance,
    /// epsilon inside the square root) followed by the affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: S,
    ) -> Result<VarId, NumericsError> {
        let (rows, cols) = self.value(x).dims2()?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let t = self.value(id);
            if t.rank() != 1 || t.len() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: self.value(x).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut out = self.value(x).clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let (mean, std) = row_moments(row, eps);
            for c in 0..cols {
                let xhat = (row[c] - mean) / std;
                row[c] = self.nodes[gain.0].value.data()[c] * xhat + self.nodes[bias.0].value.data()[c];
            }
        }
        self.push_op(out, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias])
    }

    /// Mean cross entropy in nats per unmasked step, computed with
    /// log-sum-exp.
    pub fn cross_entropy(
        &mut self,
        logits: VarId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<VarId, NumericsError> {
        let (steps, vocab) = self.value(logits).dims2()?;
        if targets.len() != steps || mask.len() != steps {
            return Err(NumericsError::LengthMismatch {
                op: "cross_entropy",
                expected: steps,
                got: if targets.len() != steps { targets.len() } else { mask.len() },
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(NumericsError::TargetOutOfRange { index: t, vocab });
        }
        let unmasked = mask.iter().filter(|&&m| m).count();
        if unmasked == 0 {
            return Err(NumericsError::EmptyMask);
        }
        let mut total = S::zero();
        for step in 0..steps {
            if !mask[step] {
                continue;
            }
            let row = self.value(logits).row(step);
            total = total + log_sum_exp(row) - row[targets[step]];
        }
        let value = Tensor::scalar(total / S::cast(unmasked as f64));
        self.push_op(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        )
    }

    /// Row lookup `table[ids[i]]`; gradients scatter-add back into the
    /// table (token embeddings).
    pub fn gather(&mut self, table: VarId, ids: &[usize]) -> Result<VarId, NumericsError> {
        let (vocab, dim) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::TargetOutOfRange { index: bad, vocab });
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        self.push_op(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId, NumericsError> {
        let total = self.value(x).data().iter().copied().sum();
        self.push_op(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Treat a value as a constant: forward passthrough, no gradient.
    pub fn detach(&mut self, x: VarId) -> Result<VarId, NumericsError> {
        let value = self.value(x).clone();
        let _ = x;
        self.push_op(value, Op::Detach, &[])
    }

    /// Reverse pass from a scalar `loss`, seeded with `seed` (normally 1;
    /// batch averaging uses token-count weights).
    pub fn backward(&mut self, loss: VarId, seed: S) -> Result<Gradients<S>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut slots: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::filled(self.value(loss).shape(), seed));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = slots[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &upstream, &mut slots)?;
            slots[idx] = Some(upstream);
        }
        Ok(Gradients { slots })
    }

    /// Gradients keyed by parameter name.
    pub fn named_grads(&self, grads: &Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .grad(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    fn backprop_node(
        &self,
        idx: usize,
        upstream: &Tensor<S>,
        slots: &mut [Option<Tensor<S>>],
    ) -> Result<(), NumericsError> {
        let node = &self.nodes[idx];
        let accumulate = |slots: &mut [Option<Tensor<S>>], target: VarId, delta: Tensor<S>| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            match &mut slots[target.0] {
                Some(existing) => existing.add_scaled_assign(&delta, S::one()),
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                // dA = dC * B^T
                if self.nodes[a.0].requires_grad {
                    let bt = self.value(*b).transposed2()?;
                    let mut da = vec![S::zero(); m * k];
                    matmul_into(upstream, &bt, &mut da, m, n, k);
                    accumulate(slots, *a, Tensor::new(vec![m, k], da)?);
                }
                // dB = A^T * dC
                if self.nodes[b.0].requires_grad {
                    let at = self.value(*a).transposed2()?;
                    let mut db = vec![S::zero(); k * n];
                    matmul_into(&at, upstream, &mut db, k, m, n);
                    accumulate(slots, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                accumulate(slots, *a, upstream.clone());
                accumulate(slots, *b, upstream.clone());
            }
            Op::AddRow(x, bias) => {
                accumulate(slots, *x, upstream.clone());
                if self.nodes[bias.0].requires_grad {
                    let (rows, d) = upstream.dims2()?;
                    let mut db = vec![S::zero(); d];
                    for r in 0..rows {
                        for (slot, &g) in db.iter_mut().zip(upstream.row(r)) {
                            *slot = *slot + g;
                        }
                    }
                    accumulate(slots, *bias, Tensor::new(vec![d], db)?);
                }
            }
            Op::Sub(a, b) => {
                accumulate(slots, *a, upstream.clone());
                accumulate(slots, *b, upstream.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    accumulate(slots, *a, zip(upstream, self.value(*b), |g, y| g * y));
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(slots, *b, zip(upstream, self.value(*a), |g, x| g * x));
                }
            }
            Op::MaxElem(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    let da = Tensor::new(
                        va.shape().to_vec(),
                        upstream
                            .data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(&g, (&x, &y))| if x >= y { g } else { S::zero() })
                            .collect(),
                    )?;
                    accumulate(slots, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = Tensor::new(
                        vb.shape().to_vec(),
                        upstream
                            .data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(&g, (&x, &y))| if x >= y { S::zero() } else { g })
                            .collect(),
                    )?;
                    accumulate(slots, *b, db);
                }
            }
            Op::Scale(x, factor) => {
                accumulate(slots, *x, upstream.map(|g| g * *factor));
            }
            Op::Transpose(x) => {
                accumulate(slots, *x, upstream.transposed2()?);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0usize;
                for &x in xs {
                    let (r, c) = self.value(x).dims2()?;
                    if self.nodes[x.0].requires_grad {
                        let block = upstream.data()[offset * c..(offset + r) * c].to_vec();
                        accumulate(slots, x, Tensor::new(vec![r, c], block)?);
                    }
                    offset += r;
                }
            }
            Op::SliceCols { src, start, len } => {
                if self.nodes[src.0].requires_grad {
                    let (rows, cols) = self.value(*src).dims2()?;
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        let g_row = upstream.row(r);
                        let dst = &mut dx.data_mut()[r * cols + start..r * cols + start + len];
                        for (slot, &g) in dst.iter_mut().zip(g_row) {
                            *slot = g;
                        }
                    }
                    accumulate(slots, *src, dx);
                }
            }
            Op::Relu(x) => {
                let dx = zip(upstream, self.value(*x), |g, v| {
                    if v > S::zero() {
                        g
                    } else {
                        S::zero()
                    }
                });
                accumulate(slots, *x, dx);
            }
            Op::Softmax(x) => {
                // dX = y ⊙ (dY - <dY, y>) per row, where y is the output.
                let y = &node.value;
                let (rows, cols) = y.dims2()?;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &upstream.data()[r * cols..(r + 1) * cols];
                    let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    let out = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(slots, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let (rows, cols) = vx.dims2()?;
                let inv_n = S::one() / S::cast(cols as f64);
                let mut dx = Tensor::zeros(vx.shape());
                let mut dgain = vec![S::zero(); cols];
                let mut dbias = vec![S::zero(); cols];
                for r in 0..rows {
                    let xr = &vx.data()[r * cols..(r + 1) * cols];
                    let gr = &upstream.data()[r * cols..(r + 1) * cols];
                    let (mean, std) = row_moments(xr, *eps);
                    let xhat: Vec<S> = xr.iter().map(|&v| (v - mean) / std).collect();
                    let dxhat: Vec<S> = gr
                        .iter()
                        .zip(vg.data())
                        .map(|(&g, &gn)| g * gn)
                        .collect();
                    let mean_dxhat: S = dxhat.iter().copied().sum::<S>() * inv_n;
                    let mean_dxhat_xhat: S = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(&a, &b)| a * b)
                        .sum::<S>()
                        * inv_n;
                    let out = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        out[c] = (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / std;
                        dgain[c] = dgain[c] + gr[c] * xhat[c];
                        dbias[c] = dbias[c] + gr[c];
                    }
                }
                accumulate(slots, *x, dx);
                accumulate(slots, *gain, Tensor::new(vec![cols], dgain)?);
                accumulate(slots, *bias, Tensor::new(vec![cols], dbias)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                if self.nodes[logits.0].requires_grad {
                    let v = self.value(*logits);
                    let (steps, vocab) = v.dims2()?;
                    let unmasked = mask.iter().filter(|&&m| m).count();
                    let scale = upstream.item()? / S::cast(unmasked as f64);
                    let mut dl = Tensor::zeros(v.shape());
                    for step in 0..steps {
                        if !mask[step] {
                            continue;
                        }
                        let row = v.row(step);
                        let mut probs = row.to_vec();
                        softmax_row(&mut probs);
                        let out = &mut dl.data_mut()[step * vocab..(step + 1) * vocab];
                        for c in 0..vocab {
                            let indicator = if c == targets[step] { S::one() } else { S::zero() };
                            out[c] = (probs[c] - indicator) * scale;
                        }
                    }
                    accumulate(slots, *logits, dl);
                }
            }
            Op::Gather { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let (vocab, dim) = self.value(*table).dims2()?;
                    let mut dt = Tensor::zeros(&[vocab, dim]);
                    for (row, &id) in ids.iter().enumerate() {
                        let g_row = upstream.row(row);
                        let dst = &mut dt.data_mut()[id * dim..(id + 1) * dim];
                        for (slot, &g) in dst.iter_mut().zip(g_row) {
                            *slot = *slot + g;
                        }
                    }
                    accumulate(slots, *table, dt);
                }
            }
            Op::Sum(x) => {
                let g = upstream.item()?;
                accumulate(slots, *x, Tensor::filled(self.value(*x).shape(), g));
            }
        }
        Ok(())
    }
}

fn zip<S: Real>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::raw(a.shape().to_vec(), data)
}

fn softmax_row<S: Real>(row: &mut [S]) {
    let max = row
        .iter()
        .copied()
        .fold(S::neg_infinity(), |acc, v| if v > acc { v } else { acc });
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn log_sum_exp<S: Real>(row: &[S]) -> S {
    let max = row
        .iter()
        .copied()
        .fold(S::neg_infinity(), |acc, v| if v > acc { v } else { acc });
    let total: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// Population mean and epsilon-stabilized standard deviation of one row.
fn row_moments<S: Real>(row: &[S], eps: S) -> (S, S) {
    let n = S::cast(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<S>()
        / n;
    (mean, (var + eps).sqrt())
}
