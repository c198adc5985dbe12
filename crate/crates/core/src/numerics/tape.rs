//! Reverse-mode differentiation over an eagerly evaluated operation tape.
//!
//! Forward calls record one node per result; [`Tape::backward`] replays the
//! tape in reverse and accumulates gradients on every `requires_grad`
//! ancestor. A tape lives for one forward/backward cycle and is then dropped.
//!
//! Shape violations are programmer errors and panic; numeric failures
//! (non-finite loss or gradients) surface as [`Error::NonFinite`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Row-major visibility flags for masked softmax; `true` = key is visible.
type Visibility = Arc<Vec<bool>>;

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Gelu(Var),
    Softmax(Var, Option<Visibility>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    SumAll(Var),
    SumRows(Var),
    Embed {
        table: Var,
        ids: Arc<Vec<u32>>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    FocalLoss {
        logits: Var,
        targets: Arc<Vec<u32>>,
        gamma: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll(..) => "sum_all",
            Op::SumRows(..) => "sum_rows",
            Op::Embed { .. } => "embed",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::FocalLoss { .. } => "focal_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op,
    /// Saved forward intermediates the backward rule needs.
    aux: Vec<Vec<T>>,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op, aux: Vec<Vec<T>>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf, vec![])
    }

    /// Trainable input; `backward` populates its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf, vec![])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let rg = self.needs_grad(&[a, b]);
        self.push(value, rg, Op::Add(a, b), vec![])
    }

    /// `[r, c] + [c]`, the row vector broadcast over every row.
    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        let (vm, vr) = (&self.nodes[m.0].value, &self.nodes[row.0].value);
        let c = vm.last_dim();
        assert_eq!(vr.shape(), &[c], "add_row: row must have shape [{c}]");
        let mut data = vm.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(vr.data()) {
                *x += *y;
            }
        }
        let value = Tensor::new(vm.shape().to_vec(), data);
        let rg = self.needs_grad(&[m, row]);
        self.push(value, rg, Op::AddRow(m, row), vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let rg = self.needs_grad(&[a, b]);
        self.push(value, rg, Op::Mul(a, b), vec![])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let f = T::of(factor);
        let data = va.data().iter().map(|x| *x * f).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let rg = self.needs_grad(&[a]);
        self.push(value, rg, Op::Scale(a, factor), vec![])
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2, "matmul: lhs must be rank 2");
        assert_eq!(vb.shape().len(), 2, "matmul: rhs must be rank 2");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let data = mm(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data);
        let rg = self.needs_grad(&[a, b]);
        self.push(value, rg, Op::MatMul(a, b), vec![])
    }

    /// `[m, k] @ [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2, "matmul_nt: lhs must be rank 2");
        assert_eq!(vb.shape().len(), 2, "matmul_nt: rhs must be rank 2");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (n, k2) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul_nt: inner dimensions {k} vs {k2}");
        let data = mm_nt(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data);
        let rg = self.needs_grad(&[a, b]);
        self.push(value, rg, Op::MatMulNT(a, b), vec![])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| gelu_fwd(*x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let rg = self.needs_grad(&[a]);
        self.push(value, rg, Op::Gelu(a), vec![])
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.masked_softmax(a, None)
    }

    /// Softmax along the last axis where only `visible` positions participate;
    /// masked positions get exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, visible: Option<Visibility>) -> Var {
        let va = &self.nodes[a.0].value;
        let c = va.last_dim();
        assert!(c > 0, "softmax: empty last dimension");
        if let Some(vis) = &visible {
            assert_eq!(vis.len(), va.numel(), "softmax: mask length mismatch");
        }
        let mut data = vec![T::zero(); va.numel()];
        for (r, row) in va.data().chunks(c).enumerate() {
            let vis_row = visible.as_ref().map(|v| &v[r * c..(r + 1) * c]);
            let out = &mut data[r * c..(r + 1) * c];
            softmax_row(row, vis_row, out);
        }
        let value = Tensor::new(va.shape().to_vec(), data);
        let rg = self.needs_grad(&[a]);
        self.push(value, rg, Op::Softmax(a, visible), vec![])
    }

    /// Per-row normalization over the last axis with population (1/d) variance:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let d = vx.last_dim();
        assert!(d > 0, "layer_norm: empty last dimension");
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        assert_eq!(vg.shape(), &[d], "layer_norm: gamma must have shape [{d}]");
        assert_eq!(vb.shape(), &[d], "layer_norm: beta must have shape [{d}]");
        let rows = vx.rows();
        let mut data = vec![T::zero(); vx.numel()];
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let inv_d = T::of(1.0 / d as f64);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row
                .iter()
                .map(|v| (*v - mean) * (*v - mean))
                .sum::<T>()
                * inv_d;
            let istd = (var + T::of(eps)).sqrt().recip();
            inv_std[r] = istd;
            for i in 0..d {
                let h = (row[i] - mean) * istd;
                xhat[r * d + i] = h;
                data[r * d + i] = vg.data()[i] * h + vb.data()[i];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.needs_grad(&[x, gamma, beta]);
        self.push(value, rg, Op::LayerNorm { x, gamma, beta }, vec![xhat, inv_std])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let total = va.data().iter().copied().sum::<T>();
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::scalar(total), rg, Op::SumAll(a), vec![])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[r, c] -> [c]`, summing over rows. Each column is accumulated in a
    /// value-sorted order, so the result is exactly invariant to row
    /// permutations despite float non-associativity.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let c = va.last_dim();
        let rows = va.rows();
        let mut out = vec![T::zero(); c];
        let mut column = vec![T::zero(); rows];
        for (j, o) in out.iter_mut().enumerate() {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = va.data()[r * c + j];
            }
            column.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
            *o = column.iter().copied().sum();
        }
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::new(vec![c], out), rg, Op::SumRows(a), vec![])
    }

    /// Row gather from `table [V, d]` -> `[ids.len(), d]`.
    pub fn embed(&mut self, table: Var, ids: Arc<Vec<u32>>) -> Var {
        let vt = &self.nodes[table.0].value;
        assert_eq!(vt.shape().len(), 2, "embed: table must be rank 2");
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        assert!(!ids.is_empty(), "embed: empty id list");
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            let id = id as usize;
            assert!(id < v, "embed: id {id} out of range for table with {v} rows");
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data);
        let rg = self.needs_grad(&[table]);
        self.push(value, rg, Op::Embed { table, ids }, vec![])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape().len(), 2, "slice_rows: input must be rank 2");
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        assert!(start + len <= r, "slice_rows: {start}+{len} exceeds {r} rows");
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data);
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::SliceRows { x, start }, vec![])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape().len(), 2, "slice_cols: input must be rank 2");
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        assert!(start + len <= c, "slice_cols: {start}+{len} exceeds {c} cols");
        let mut data = Vec::with_capacity(r * len);
        for row in vx.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], data);
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::SliceCols { x, start }, vec![])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let c = self.nodes[parts[0].0].value.last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let vp = &self.nodes[p.0].value;
            assert_eq!(vp.shape().len(), 2, "concat_rows: inputs must be rank 2");
            assert_eq!(vp.shape()[1], c, "concat_rows: column mismatch");
            rows += vp.shape()[0];
            data.extend_from_slice(vp.data());
        }
        let value = Tensor::new(vec![rows, c], data);
        let rg = self.needs_grad(parts);
        self.push(value, rg, Op::ConcatRows(parts.to_vec()), vec![])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let r = self.nodes[parts[0].0].value.shape()[0];
        let total_c: usize = parts
            .iter()
            .map(|p| {
                let vp = &self.nodes[p.0].value;
                assert_eq!(vp.shape().len(), 2, "concat_cols: inputs must be rank 2");
                assert_eq!(vp.shape()[0], r, "concat_cols: row mismatch");
                vp.shape()[1]
            })
            .sum();
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for p in parts {
                let vp = &self.nodes[p.0].value;
                let c = vp.shape()[1];
                data.extend_from_slice(&vp.data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![r, total_c], data);
        let rg = self.needs_grad(parts);
        self.push(value, rg, Op::ConcatCols(parts.to_vec()), vec![])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let vx = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        assert_eq!(numel, vx.numel(), "reshape: element count mismatch");
        let value = Tensor::new(shape, vx.data().to_vec());
        let rg = self.needs_grad(&[x]);
        self.push(value, rg, Op::Reshape(x), vec![])
    }

    /// Summed focal loss `sum_i -(1 - p_t)^gamma * log(p_t)` over rows of
    /// `logits [N, V]` with one target id per row. `gamma = 0` reduces to the
    /// cross-entropy sum. Probabilities come from a log-sum-exp softmax.
    pub fn focal_loss(&mut self, logits: Var, targets: Arc<Vec<u32>>, gamma: f64) -> Var {
        let vl = &self.nodes[logits.0].value;
        assert_eq!(vl.shape().len(), 2, "focal_loss: logits must be rank 2");
        let (n, v) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(targets.len(), n, "focal_loss: one target per logit row");
        assert!(gamma >= 0.0, "focal_loss: gamma must be non-negative");
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for (r, row) in vl.data().chunks(v).enumerate() {
            let t = targets[r] as usize;
            assert!(t < v, "focal_loss: target {t} out of range {v}");
            let out = &mut probs[r * v..(r + 1) * v];
            softmax_row(row, None, out);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .map(|z| (*z - max).exp())
                .sum::<T>()
                .ln()
                + max;
            let log_pt = row[t] - lse;
            let pt = out[t];
            let focal = (T::one() - pt).powf(T::of(gamma));
            total += -(focal * log_pt);
        }
        let rg = self.needs_grad(&[logits]);
        self.push(
            Tensor::scalar(total),
            rg,
            Op::FocalLoss {
                logits,
                targets,
                gamma,
            },
            vec![probs],
        )
    }

    /// Reverse pass from a scalar loss; populates `grad` on every
    /// `requires_grad` ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: node.value.shape().to_vec(),
            });
        }
        if !node.requires_grad {
            return Err(Error::DetachedGraph);
        }
        if !node.value.all_finite() {
            return Err(Error::NonFinite {
                context: "loss value".into(),
            });
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut done: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            done[i] = Some(g);
        }

        for (i, slot) in done.into_iter().enumerate() {
            if let Some(g) = slot {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of {} node {}", self.nodes[i].op.name(), i),
                    });
                }
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(shape, g));
            }
        }
        Ok(())
    }

    /// First non-finite node value, if any; used for failure diagnostics.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[v.0].value.numel()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddRow(m, row) => {
                let c = self.nodes[row.0].value.numel();
                self.acc(grads, *m, |gm| add_into(gm, g));
                self.acc(grads, *row, |gr| {
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.acc(grads, *a, |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *o += *gi * *bi;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *o += *gi * *ai;
                    }
                });
            }
            Op::Scale(a, factor) => {
                let f = T::of(*factor);
                self.acc(grads, *a, |ga| {
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += *gi * f;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                self.acc(grads, *a, |ga| {
                    // dA = dC @ B^T
                    add_into(ga, &mm_nt(g, vb.data(), m, n, k));
                });
                self.acc(grads, *b, |gb| {
                    // dB = A^T @ dC
                    add_into(gb, &mm_tn(va.data(), g, m, k, n));
                });
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                self.acc(grads, *a, |ga| {
                    // dA = dC @ B
                    add_into(ga, &mm(g, vb.data(), m, n, k));
                });
                self.acc(grads, *b, |gb| {
                    // dB = dC^T @ A
                    add_into(gb, &mm_tn(g, va.data(), m, n, k));
                });
            }
            Op::Gelu(a) => {
                let va = self.nodes[a.0].value.data();
                self.acc(grads, *a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(va) {
                        *o += *gi * gelu_bwd(*x);
                    }
                });
            }
            Op::Softmax(a, visible) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                self.acc(grads, *a, |ga| {
                    for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .map(|(yi, gi)| *yi * *gi)
                            .sum::<T>();
                        let out = &mut ga[r * c..(r + 1) * c];
                        for j in 0..c {
                            let vis = visible.as_ref().map_or(true, |v| v[r * c + j]);
                            if vis {
                                out[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = node.value.last_dim();
                let rows = node.value.rows();
                let xhat = &node.aux[0];
                let inv_std = &node.aux[1];
                let vg = self.nodes[gamma.0].value.data();
                let inv_d = T::of(1.0 / d as f64);
                self.acc(grads, *beta, |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *x, |gx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let dxhat = gr[j] * vg[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * hr[j];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        for j in 0..d {
                            let dxhat = gr[j] * vg[j];
                            gx[r * d + j] +=
                                inv_std[r] * (dxhat - mean_dxhat - hr[j] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gs = g[0];
                self.acc(grads, *a, |ga| {
                    for o in ga.iter_mut() {
                        *o += gs;
                    }
                });
            }
            Op::SumRows(a) => {
                let c = node.value.numel();
                self.acc(grads, *a, |ga| {
                    for chunk in ga.chunks_mut(c) {
                        add_into(chunk, g);
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = node.value.last_dim();
                self.acc(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        add_into(dst, &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.value.last_dim();
                self.acc(grads, *x, |gx| {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                });
            }
            Op::SliceCols { x, start } => {
                let len = node.value.last_dim();
                let c = self.nodes[x.0].value.last_dim();
                self.acc(grads, *x, |gx| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + len], gr);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.acc(grads, *p, |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total_c = node.value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.last_dim();
                    self.acc(grads, *p, |gp| {
                        for (r, chunk) in gp.chunks_mut(c).enumerate() {
                            add_into(chunk, &g[r * total_c + offset..r * total_c + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |gx| add_into(gx, g));
            }
            Op::FocalLoss {
                logits,
                targets,
                gamma,
            } => {
                let probs = &node.aux[0];
                let v = self.nodes[logits.0].value.last_dim();
                let gs = g[0];
                let gam = T::of(*gamma);
                self.acc(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let t = t as usize;
                        let p = &probs[r * v..(r + 1) * v];
                        let pt = p[t];
                        let u = T::one() - pt;
                        // d/dz_j [-(1-pt)^g log pt] = (g*pt*u^(g-1)*log pt - u^g) * (delta_tj - p_j)
                        let coeff = if *gamma == 0.0 || u == T::zero() {
                            -u.powf(gam)
                        } else {
                            gam * pt * u.powf(gam - T::one()) * pt.ln() - u.powf(gam)
                        };
                        let out = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            let delta = if j == t { T::one() } else { T::zero() };
                            out[j] += gs * coeff * (delta - p[j]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// `c[m,n] = a[m,k] @ b[k,n]`.
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] @ b[n,k]^T`.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| *x * *y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T @ b[m,n]`.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn softmax_row<T: Scalar>(row: &[T], visible: Option<&[bool]>, out: &mut [T]) {
    let mut max = T::neg_infinity();
    for (j, v) in row.iter().enumerate() {
        if visible.map_or(true, |m| m[j]) && *v > max {
            max = *v;
        }
    }
    assert!(
        max > T::neg_infinity(),
        "softmax: row with no visible entries"
    );
    let mut sum = T::zero();
    for (j, v) in row.iter().enumerate() {
        if visible.map_or(true, |m| m[j]) {
            let e = (*v - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = T::zero();
        }
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}
