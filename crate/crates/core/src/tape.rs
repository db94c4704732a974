//! Reverse-mode differentiation over an append-only op tape.
//!
//! A [`Tape`] owns every value computed on it; [`Var`] is a copyable handle.
//! Nodes are pushed in evaluation order, so the tape is always topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, LOG_CLAMP};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    /// Ops are recorded and can be differentiated.
    Recording,
    /// Values only; `backward` is refused.
    Frozen,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CausalSoftmax(Var),
    LogSoftmaxPick {
        logits: Var,
        targets: Vec<usize>,
        clamped: Vec<bool>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ReverseRows(Var),
    Sum(Var),
    Dot(Var, Vec<f64>),
    Exp(Var),
    Hinge(Var),
    ClippedSurrogate {
        logp: Var,
        ratio: Vec<f64>,
        advantage: Vec<f64>,
        active: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: TapeMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to trainable leaves.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: TapeMode::Recording,
        }
    }

    pub fn frozen() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: TapeMode::Frozen,
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.mode == TapeMode::Recording
            && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf; its gradient appears in [`Gradients`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let trainable = self.mode == TapeMode::Recording;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::add(self.value(a), self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::sub(self.value(a), self.value(b));
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::mul(self.value(a), self.value(b));
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = tensor::scale(self.value(a), s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Matrix plus a broadcast row vector.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = tensor::add_row(self.value(a), self.value(row));
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul_nt(self.value(a), self.value(b));
        self.push(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = tensor::transpose(self.value(a));
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).reshape(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = tensor::map(self.value(a), tensor::gelu_scalar);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = tensor::map(self.value(a), f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// `max(0, x)` elementwise; the subgradient at exactly 0 is 0.
    pub fn hinge(&mut self, a: Var) -> Var {
        let v = tensor::map(self.value(a), |x| x.max(0.0));
        self.push(v, Op::Hinge(a), &[a])
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (y, xhat, rstd) = tensor::layernorm(self.value(x), self.value(gain), self.value(bias));
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let v = tensor::gather_rows(self.value(table), ids);
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn causal_softmax(&mut self, s: Var) -> Var {
        let v = tensor::causal_softmax(self.value(s));
        self.push(v, Op::CausalSoftmax(s), &[s])
    }

    /// Log-probability of `targets[i]` under the softmax of row `i` of `logits`.
    ///
    /// Probabilities are clamped at [`LOG_CLAMP`]; clamped entries pass no gradient.
    pub fn log_softmax_pick(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        let (n, m) = x.dims2();
        assert_eq!(n, targets.len(), "log_softmax_pick: one target per row");
        let floor = LOG_CLAMP.ln();
        let mut out = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < m, "target {t} out of range {m}");
            let lp = tensor::log_softmax_row(x.row(i)).nth(t).unwrap();
            clamped.push(lp < floor);
            out.push(lp.max(floor));
        }
        let v = Tensor::computed(vec![n], out);
        self.push(
            v,
            Op::LogSoftmaxPick {
                logits,
                targets: targets.to_vec(),
                clamped,
            },
            &[logits],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (n, m) = t.dims2();
        assert!(start + len <= m && len > 0, "slice_cols out of range");
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![n, len], out);
        self.push(v, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), n, "concat_cols row mismatch");
                out.extend_from_slice(t.row(i));
            }
        }
        let v = Tensor::new(vec![n, total], out);
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (n, m) = t.dims2();
        assert!(start + len <= n && len > 0, "slice_rows out of range");
        let v = Tensor::new(
            vec![len, m],
            t.data()[start * m..(start + len) * m].to_vec(),
        );
        self.push(v, Op::SliceRows { x, start }, &[x])
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, _) = t.dims2();
        let mut out = Vec::with_capacity(t.numel());
        for i in (0..n).rev() {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(t.shape().to_vec(), out);
        self.push(v, Op::ReverseRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ wᵢ xᵢ` with constant weights.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Var {
        let t = self.value(x);
        assert_eq!(t.numel(), weights.len(), "dot: weight count");
        let s = t.data().iter().zip(weights).map(|(a, w)| a * w).sum();
        self.push(Tensor::scalar(s), Op::Dot(x, weights.to_vec()), &[x])
    }

    /// Per-token PPO clipped surrogate `min(ρA, clip(ρ, 1-ε, 1+ε)A)` with
    /// `ρ = exp(logp − logp_old)`.
    ///
    /// Where the clipped branch is the minimum (including the boundary) the
    /// gradient is 0; with `ε = 0` this holds at `ρ = 1`.
    pub fn clipped_surrogate(
        &mut self,
        logp: Var,
        logp_old: &[f64],
        advantage: &[f64],
        eps: f64,
    ) -> Var {
        let lp = self.value(logp);
        let n = lp.numel();
        assert_eq!(n, logp_old.len(), "clipped_surrogate: logp_old length");
        assert_eq!(n, advantage.len(), "clipped_surrogate: advantage length");
        let mut out = Vec::with_capacity(n);
        let mut ratio = Vec::with_capacity(n);
        let mut active = Vec::with_capacity(n);
        for i in 0..n {
            let r = (lp.data()[i] - logp_old[i]).exp();
            let a = advantage[i];
            let clipped = (a > 0.0 && r >= 1.0 + eps) || (a < 0.0 && r <= 1.0 - eps);
            let rc = r.clamp(1.0 - eps, 1.0 + eps);
            out.push((r * a).min(rc * a));
            ratio.push(r);
            active.push(!clipped);
        }
        let v = Tensor::computed(vec![n], out);
        self.push(
            v,
            Op::ClippedSurrogate {
                logp,
                ratio,
                advantage: advantage.to_vec(),
                active,
            },
            &[logp],
        )
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf that
    /// influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.mode == TapeMode::Frozen {
            return Err(Error::contract("backward on a frozen tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        let mut grads = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.trainable {
                grads.map.insert(Var(i), g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut adj);
        }
        Ok(grads)
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(adj, *b, tensor::scale(g, -1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(adj, *a, tensor::mul(g, self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(adj, *b, tensor::mul(g, self.value(*a)));
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, tensor::scale(g, *s)),
            Op::AddRow(a, row) => {
                self.accumulate(adj, *a, g.clone());
                if self.needs(*row) {
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(adj, *row, tensor::sum_rows(g, &shape));
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(adj, *a, tensor::matmul_nt(g, self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(adj, *b, tensor::matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.needs(*a) {
                    self.accumulate(adj, *a, tensor::matmul(g, self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(adj, *b, tensor::matmul_tn(g, self.value(*a)));
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, tensor::transpose(g)),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(adj, *a, g.reshape(shape));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| g * tensor::gelu_grad_scalar(x))
                    .collect();
                self.accumulate(adj, *a, Tensor::computed(x.shape().to_vec(), d));
            }
            Op::Exp(a) => self.accumulate(adj, *a, tensor::mul(g, out)),
            Op::Hinge(a) => {
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(adj, *a, Tensor::computed(x.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, m) = xhat.dims2();
                let gv = self.value(*gain).data();
                if self.needs(*gain) {
                    let dg = tensor::sum_rows(&tensor::mul(g, xhat), self.value(*gain).shape());
                    self.accumulate(adj, *gain, dg);
                }
                if self.needs(*bias) {
                    let db = tensor::sum_rows(g, self.value(*bias).shape());
                    self.accumulate(adj, *bias, db);
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(n * m);
                    for i in 0..n {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / m as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dx.push(rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h));
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(adj, *x, Tensor::computed(shape, dx));
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let m = t.cols();
                let mut d = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, src) in d[id * m..(id + 1) * m].iter_mut().zip(g.row(r)) {
                        *dst += src;
                    }
                }
                self.accumulate(adj, *table, Tensor::computed(t.shape().to_vec(), d));
            }
            Op::CausalSoftmax(s) => {
                let (n, m) = out.dims2();
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    let p = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..=i.min(m - 1) {
                        d[i * m + j] = p[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *s, Tensor::computed(vec![n, m], d));
            }
            Op::LogSoftmaxPick {
                logits,
                targets,
                clamped,
            } => {
                let x = self.value(*logits);
                let (n, m) = x.dims2();
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    let gi = g.data()[i];
                    if clamped[i] || gi == 0.0 {
                        continue;
                    }
                    let row = &mut d[i * m..(i + 1) * m];
                    for (dst, lp) in row.iter_mut().zip(tensor::log_softmax_row(x.row(i))) {
                        *dst = -gi * lp.exp();
                    }
                    row[targets[i]] += gi;
                }
                self.accumulate(adj, *logits, Tensor::computed(vec![n, m], d));
            }
            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let (n, m) = t.dims2();
                let len = g.cols();
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    d[i * m + start..i * m + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(adj, *x, Tensor::new(vec![n, m], d));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (n, w) = self.value(p).dims2();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.accumulate(adj, p, Tensor::new(vec![n, w], d));
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let m = t.cols();
                let mut d = vec![0.0; t.numel()];
                d[start * m..start * m + g.numel()].copy_from_slice(g.data());
                self.accumulate(adj, *x, Tensor::new(t.shape().to_vec(), d));
            }
            Op::ReverseRows(x) => {
                let (n, _) = g.dims2();
                let mut d = Vec::with_capacity(g.numel());
                for i in (0..n).rev() {
                    d.extend_from_slice(g.row(i));
                }
                self.accumulate(adj, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(adj, *x, Tensor::full(&shape, g.item()));
            }
            Op::Dot(x, w) => {
                let shape = self.value(*x).shape().to_vec();
                let gi = g.item();
                self.accumulate(
                    adj,
                    *x,
                    Tensor::computed(shape, w.iter().map(|w| w * gi).collect()),
                );
            }
            Op::ClippedSurrogate {
                logp,
                ratio,
                advantage,
                active,
            } => {
                let d = (0..ratio.len())
                    .map(|i| {
                        if active[i] {
                            g.data()[i] * advantage[i] * ratio[i]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let shape = self.value(*logp).shape().to_vec();
                self.accumulate(adj, *logp, Tensor::computed(shape, d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::{with_precision, Precision};

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        with_precision(Precision::F64, || {
            let logits = Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.5]);
            let mut tape = Tape::new();
            let x = tape.param(logits.clone());
            let lp = tape.log_softmax_pick(x, &[2]);
            let nll = tape.scale(lp, -1.0);
            let loss = tape.sum(nll);
            let g = tape.backward(loss).unwrap();
            let p: Vec<f64> = tensor::log_softmax(&logits)
                .data()
                .iter()
                .map(|v| v.exp())
                .collect();
            for (j, (&gj, pj)) in g.get(x).unwrap().data().iter().zip(p).enumerate() {
                let expected = pj - if j == 2 { 1.0 } else { 0.0 };
                assert!((gj - expected).abs() < 1e-15);
            }
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(w, c);
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().item(), 5.0);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn non_scalar_loss_and_frozen_tape_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

        let mut frozen = Tape::frozen();
        let y = frozen.param(Tensor::scalar(1.0));
        let z = frozen.mul(y, y);
        assert_eq!(frozen.value(z).item(), 1.0);
        assert!(matches!(frozen.backward(z), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(
            vec![2, 3],
            vec![0.1, -0.4, 0.9, 1.3, 0.2, -0.7],
        ));
        let b = tape.param(Tensor::new(
            vec![3, 2],
            vec![0.5, 0.25, -1.0, 0.3, 0.8, -0.6],
        ));
        let c = tape.matmul(a, b);
        let h = tape.gelu(c);
        let s = tape.sum(h);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn hinge_kink_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let h = tape.hinge(x);
        let g = tape.backward(h).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn surrogate_with_zero_eps_blocks_gradient_at_unit_ratio() {
        let mut tape = Tape::new();
        let lp = tape.param(Tensor::new(vec![3], vec![-1.0, -2.0, -0.5]));
        let s = tape.clipped_surrogate(lp, &[-1.0, -2.0, -0.5], &[1.0, -1.0, 0.5], 0.0);
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        assert!(g.get(lp).unwrap().data().iter().all(|&v| v == 0.0));

        let mut tape = Tape::new();
        let lp = tape.param(Tensor::new(vec![2], vec![-1.0, -2.0]));
        let s = tape.clipped_surrogate(lp, &[-1.0, -2.0], &[1.0, -1.0], 0.2);
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        assert_eq!(g.get(lp).unwrap().data(), &[1.0, -1.0]);
    }
}
