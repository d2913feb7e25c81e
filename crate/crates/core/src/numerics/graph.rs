//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is already a
//! topological order; [`Graph::backward`] walks it once in reverse. Gradients
//! are materialized only for nodes that (transitively) depend on a
//! gradient-carrying leaf.

use std::borrow::Cow;

use super::tensor::{dot, softmax_in_place, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention scoring rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// `softmax(q·k / √d_head)` weights.
    Softmax,
    /// Raw `q·k` weights: no softmax, no scaling.
    RelaxedLinear,
}

/// Contiguous run of rows forming one causal sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    PatchRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<Span>,
        n_heads: usize,
        kind: AttentionKind,
        /// Per (span, head): row-major `len×len` lower-triangular weights.
        weights: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Owned leaf; `trainable` controls whether a gradient is accumulated.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), ng))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "mul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = xv.dims2("add_row")?;
        let bv = self.value(bias);
        if bv.numel() != n {
            return Err(Error::Dimension {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(&[x, bias]);
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(out), Op::Gelu(a), ng)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let axis = av.ndim().saturating_sub(1);
        let out = av.softmax(axis)?;
        let ng = self.needs(&[a]);
        Ok(self.push(Cow::Owned(out), Op::Softmax(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(&[a]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2("layer_norm")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != n || b.numel() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().fold(0.0, |a, v| a + v) / n as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = tv.dims2("gather")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: id, vocab });
            }
            data.extend_from_slice(tv.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2("select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::PositionOutOfRange { position: r, len: m });
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(
            Cow::Owned(out),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Copy of `x` with the listed rows overwritten. Overwritten rows pass no
    /// gradient back to `x`.
    pub fn patch_rows(&mut self, x: Var, patches: &[(usize, &[f64])]) -> Result<Var> {
        let mut out = self.value(x).clone();
        let (m, n) = out.dims2("patch_rows")?;
        let mut rows = Vec::with_capacity(patches.len());
        for &(r, values) in patches {
            if r >= m {
                return Err(Error::PositionOutOfRange { position: r, len: m });
            }
            if values.len() != n {
                return Err(Error::Dimension {
                    op: "patch_rows",
                    left: vec![n],
                    right: vec![values.len()],
                });
            }
            out.row_mut(r).copy_from_slice(values);
            rows.push(r);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), Op::PatchRows { x, rows }, ng))
    }

    /// Causal multi-head attention over independent row spans.
    ///
    /// `q`, `k`, `v` are `rows×(n_heads·d_head)`; head `h` owns columns
    /// `h·d_head..(h+1)·d_head`. Output row `t` of a span is
    /// `Σ_{j≤t} w_tj · v_j` per head, summed in ascending `j`, which is the
    /// concatenation of head outputs before any output projection.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[Span],
        n_heads: usize,
        kind: AttentionKind,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.dims2("attention")?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::Dimension {
                op: "attention",
                left: qv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        if n_heads == 0 || width % n_heads != 0 {
            return Err(Error::Contract(format!(
                "width {width} not divisible into {n_heads} heads"
            )));
        }
        let dh = width / n_heads;
        let scale = match kind {
            AttentionKind::Softmax => 1.0 / (dh as f64).sqrt(),
            AttentionKind::RelaxedLinear => 1.0,
        };
        let mut out = vec![0.0; rows * width];
        let mut weights = Vec::with_capacity(spans.len() * n_heads);
        for span in spans {
            if span.start + span.len > rows {
                return Err(Error::PositionOutOfRange {
                    position: span.start + span.len,
                    len: rows,
                });
            }
            for h in 0..n_heads {
                let c0 = h * dh;
                let mut w = vec![0.0; span.len * span.len];
                for t in 0..span.len {
                    let qr = &qv.row(span.start + t)[c0..c0 + dh];
                    let wr = &mut w[t * span.len..t * span.len + t + 1];
                    for (j, wj) in wr.iter_mut().enumerate() {
                        *wj = dot(qr, &kv.row(span.start + j)[c0..c0 + dh]) * scale;
                    }
                    if kind == AttentionKind::Softmax {
                        softmax_in_place(wr);
                    }
                    let orow = &mut out[(span.start + t) * width + c0..(span.start + t) * width + c0 + dh];
                    for (j, &wj) in wr.iter().enumerate() {
                        let vr = &vv.row(span.start + j)[c0..c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vr) {
                            *o += wj * x;
                        }
                    }
                }
                weights.push(w);
            }
        }
        let out = Tensor::new(vec![rows, width], out)?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                n_heads,
                kind,
                weights,
            },
            ng,
        ))
    }

    /// Mean cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, n) = lv.dims2("cross_entropy")?;
        if targets.len() != m || m == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= n {
                return Err(Error::TokenOutOfRange { token: t, vocab: n });
            }
            let row = &mut probs[i * n..(i + 1) * n];
            softmax_in_place(row);
            loss -= row[t as usize].max(f64::MIN_POSITIVE).ln();
        }
        loss /= m as f64;
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.add_assign(&g).expect("gradient shape"),
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse pass from a scalar `loss`, seeding `d loss = 1`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g)?;
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let da = g.matmul_nt(self.value(*b))?;
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    let db = self.value(*a).matmul_tn(g)?;
                    self.accumulate(*b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let ga = mul_elem(g, self.value(*b));
                let gb = mul_elem(g, self.value(*a));
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::AddRow(x, b) => {
                self.accumulate(*x, g.clone());
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(*b, Tensor::new(shape, db)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(*a, g.scale(*s)),
            Op::Gelu(a) => {
                let av = self.value(*a);
                let data = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv * gelu_grad(x))
                    .collect();
                let d = Tensor::new(av.shape().to_vec(), data)?;
                self.accumulate(*a, d);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(d.chunks_mut(n))
                {
                    let s = dot(yr, gr);
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - s);
                    }
                }
                let d = Tensor::new(y.shape().to_vec(), d)?;
                self.accumulate(*a, d);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(*a, Tensor::full(&shape, g.data()[0]));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = g.dims2("layer_norm")?;
                let gam = self.value(*gamma).data().to_vec();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dxh = vec![0.0; n];
                for r in 0..m {
                    let gr = g.row(r);
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        dxh[j] = gr[j] * gam[j];
                        s1 += dxh[j];
                        s2 += dxh[j] * xr[j];
                    }
                    let k = inv_std[r] / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = k * (n as f64 * dxh[j] - s1 - xr[j] * s2);
                    }
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(*x, Tensor::new(vec![m, n], dx)?);
                self.accumulate(*gamma, Tensor::new(gshape, dgamma)?);
                self.accumulate(*beta, Tensor::new(bshape, dbeta)?);
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let shape = self.value(*table).shape().to_vec();
                    let mut d = Tensor::zeros(&shape);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in d.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(*table, d);
                }
            }
            Op::SelectRows { x, rows } => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let mut d = Tensor::zeros(&shape);
                    for (r, &src) in rows.iter().enumerate() {
                        for (o, v) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(*x, d);
                }
            }
            Op::PatchRows { x, rows } => {
                let mut d = g.clone();
                for &r in rows {
                    d.row_mut(r).fill(0.0);
                }
                self.accumulate(*x, d);
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                n_heads,
                kind,
                weights,
            } => {
                self.attention_backward(g, *q, *k, *v, spans, *n_heads, *kind, weights)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let (m, n) = (shape[0], shape[1]);
                let scale = g.data()[0] / m as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t as usize] -= 1.0;
                }
                for x in &mut d {
                    *x *= scale;
                }
                self.accumulate(*logits, Tensor::new(shape, d)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        spans: &[Span],
        n_heads: usize,
        kind: AttentionKind,
        weights: &[Vec<f64>],
    ) -> Result<()> {
        let (rows, width) = g.dims2("attention")?;
        let dh = width / n_heads;
        let scale = match kind {
            AttentionKind::Softmax => 1.0 / (dh as f64).sqrt(),
            AttentionKind::RelaxedLinear => 1.0,
        };
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut dw = Vec::new();
        for (si, span) in spans.iter().enumerate() {
            for h in 0..n_heads {
                let c0 = h * dh;
                let w = &weights[si * n_heads + h];
                for t in 0..span.len {
                    let gr = &g.row(span.start + t)[c0..c0 + dh];
                    let wr = &w[t * span.len..t * span.len + t + 1];
                    dw.clear();
                    for (j, &wj) in wr.iter().enumerate() {
                        let vrow = span.start + j;
                        dw.push(dot(gr, &vv.row(vrow)[c0..c0 + dh]));
                        let dvr = &mut dv[vrow * width + c0..vrow * width + c0 + dh];
                        for (o, &x) in dvr.iter_mut().zip(gr) {
                            *o += wj * x;
                        }
                    }
                    // dw now holds d/dw_tj; convert to d/dscore_tj.
                    if kind == AttentionKind::Softmax {
                        let s = dot(wr, &dw);
                        for (d, &wj) in dw.iter_mut().zip(wr) {
                            *d = wj * (*d - s);
                        }
                    }
                    let qrow = span.start + t;
                    for (j, &ds) in dw.iter().enumerate() {
                        let ds = ds * scale;
                        let krow = span.start + j;
                        let kr = &kv.row(krow)[c0..c0 + dh];
                        let dqr = &mut dq[qrow * width + c0..qrow * width + c0 + dh];
                        for (o, &x) in dqr.iter_mut().zip(kr) {
                            *o += ds * x;
                        }
                        let qr = &qv.row(qrow)[c0..c0 + dh];
                        let dkr = &mut dk[krow * width + c0..krow * width + c0 + dh];
                        for (o, &x) in dkr.iter_mut().zip(qr) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.accumulate(q, Tensor::new(vec![rows, width], dq)?);
        self.accumulate(k, Tensor::new(vec![rows, width], dk)?);
        self.accumulate(v, Tensor::new(vec![rows, width], dv)?);
        Ok(())
    }
}

fn mul_elem(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
