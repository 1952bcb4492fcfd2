//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every trainable parameter leaf. Operations whose inputs are
//! all constants or frozen parameters are never differentiated, which is how
//! freezing is enforced: frozen parameters simply never receive a gradient.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{dot, log_sum_exp, softmax_into, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Index of a parameter tensor inside a model's parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Direction of the KL divergence used for logit distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum KlDirection {
    /// KL(teacher ‖ student)
    #[default]
    TeacherToStudent,
    /// KL(student ‖ teacher)
    StudentToTeacher,
}

enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention(AttentionCache),
    Gather { src: Var, rows: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    HardCrossEntropy { logits: Var, targets: Vec<(usize, usize)> },
    SoftCrossEntropy { logits: Var, targets: Matrix, rows: Vec<usize> },
    KlDiv { logits: Var, teacher_logp: Matrix, rows: Vec<usize>, direction: KlDirection },
    MseMean { x: Var, target: Matrix },
    BceWithLogits { logits: Var, targets: Matrix },
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    seq_len: usize,
    key_valid: Vec<bool>,
    probs: Vec<f64>,
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.by_param.iter()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds `g` into the gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match self.by_param.get_mut(&id) {
            Some(m) => m.add_assign(g),
            None => {
                self.by_param.insert(id, g.clone());
            }
        }
    }

    /// Merges all of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.accumulate(*id, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.by_param.values().map(|g| dot(g.data(), g.data())).sum())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Records a parameter leaf; only `trainable` leaves receive gradients.
    pub fn param(&mut self, id: ParamId, value: &Matrix, trainable: bool) -> Var {
        self.push(value.clone(), Op::Leaf { param: Some(id) }, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `[1, cols]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), b.cols(), "bias width");
        let cols = value.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (x, y) in chunk.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddRow(a, bias), ng)
    }

    /// `x · W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, m: Matrix) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), m.shape());
        let data = x.data().iter().zip(m.data()).map(|(p, q)| p * q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data);
        let ng = self.needs(a);
        self.push(value, Op::MulConst(a, m), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = g[c] * xhat.get(r, c) + b[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// `seq_len` rows each. Keys at positions with `key_valid == false`
    /// (padding) get zero attention weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize, seq_len: usize, key_valid: Vec<bool>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hidden = qv.cols();
        assert_eq!(qv.rows(), batch * seq_len);
        assert_eq!(key_valid.len(), batch * seq_len);
        assert_eq!(hidden % heads, 0);
        let dh = hidden / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = Matrix::zeros(batch * seq_len, hidden);
        let mut scores = vec![0.0; seq_len];
        let mut p = vec![0.0; seq_len];
        for b in 0..batch {
            let base = b * seq_len;
            let valid: Vec<usize> = (0..seq_len).filter(|&j| key_valid[base + j]).collect();
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qi = &qv.row(base + i)[off..off + dh];
                    let s = &mut scores[..valid.len()];
                    for (sj, &j) in s.iter_mut().zip(&valid) {
                        *sj = dot(qi, &kv.row(base + j)[off..off + dh]) * scale;
                    }
                    let pv = &mut p[..valid.len()];
                    softmax_into(s, pv);
                    let prow = &mut probs[((b * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let orow = &mut out.row_mut(base + i)[off..off + dh];
                    for (&pj, &j) in pv.iter().zip(&valid) {
                        prow[j] = pj;
                        let vj = &vv.row(base + j)[off..off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention(AttentionCache { q, k, v, heads, batch, seq_len, key_valid, probs }), ng)
    }

    /// Picks rows of `src` by index (embedding lookup or row selection).
    pub fn gather(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let value = self.value(src).select_rows(&rows);
        let ng = self.needs(src);
        self.push(value, Op::Gather { src, rows }, ng)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = libm::sqrt(dot(xv.row(r), xv.row(r))).max(1e-300);
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// Mean over `(row, class)` pairs of `-log softmax(logits[row])[class]`.
    /// An empty target list yields a constant zero.
    pub fn hard_cross_entropy(&mut self, logits: Var, targets: Vec<(usize, usize)>) -> Var {
        let lv = self.value(logits);
        let n = targets.len();
        let mut total = 0.0;
        for &(r, c) in &targets {
            let row = lv.row(r);
            total += log_sum_exp(row) - row[c];
        }
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        let ng = self.needs(logits) && n > 0;
        self.push(Matrix::scalar(value), Op::HardCrossEntropy { logits, targets }, ng)
    }

    /// Mean over `rows` of `-Σ_j targets[i, j] · log softmax(logits[rows[i]])_j`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Matrix, rows: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.rows(), rows.len());
        assert_eq!(targets.cols(), lv.cols());
        let mut total = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            total -= targets.row(i).iter().zip(row).map(|(p, z)| p * (z - lse)).sum::<f64>();
        }
        let value = if rows.is_empty() { 0.0 } else { total / rows.len() as f64 };
        let ng = self.needs(logits) && !rows.is_empty();
        self.push(Matrix::scalar(value), Op::SoftCrossEntropy { logits, targets, rows }, ng)
    }

    /// Mean over `rows` of the KL divergence between the softmax of
    /// `logits[rows[i]]` and the constant distribution `exp(teacher_logp[i])`.
    pub fn kl_div(&mut self, logits: Var, teacher_logp: Matrix, rows: Vec<usize>, direction: KlDirection) -> Var {
        let lv = self.value(logits);
        assert_eq!(teacher_logp.rows(), rows.len());
        let mut total = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            let tl = teacher_logp.row(i);
            total += match direction {
                KlDirection::TeacherToStudent => tl.iter().zip(row).map(|(&lt, &z)| libm::exp(lt) * (lt - (z - lse))).sum::<f64>(),
                KlDirection::StudentToTeacher => tl.iter().zip(row).map(|(&lt, &z)| libm::exp(z - lse) * ((z - lse) - lt)).sum::<f64>(),
            };
        }
        let value = if rows.is_empty() { 0.0 } else { total / rows.len() as f64 };
        let ng = self.needs(logits) && !rows.is_empty();
        self.push(Matrix::scalar(value), Op::KlDiv { logits, teacher_logp, rows, direction }, ng)
    }

    /// Mean of `(x - target)²` over all elements.
    pub fn mse_mean(&mut self, x: Var, target: Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        let n = xv.len().max(1) as f64;
        let value = xv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let ng = self.needs(x);
        self.push(Matrix::scalar(value), Op::MseMean { x, target }, ng)
    }

    /// Mean binary cross-entropy with logits over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape());
        let n = lv.len().max(1) as f64;
        let value = lv.data().iter().zip(targets.data()).map(|(&z, &y)| softplus(z) - y * z).sum::<f64>() / n;
        let ng = self.needs(logits);
        self.push(Matrix::scalar(value), Op::BceWithLogits { logits, targets }, ng)
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(m) => m.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>], out: &mut Gradients) {
        match &node.op {
            Op::Leaf { param } => {
                if let Some(id) = param {
                    out.accumulate(*id, g);
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.matmul_bt(self.value(*b)));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g.clone());
                if self.needs(*bias) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, y) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    self.acc(grads, *bias, s);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scaled(*s)),
            Op::MulConst(a, m) => {
                let data = g.data().iter().zip(m.data()).map(|(x, y)| x * y).collect();
                self.acc(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = g.data().iter().zip(x.data()).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                self.acc(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = xhat.shape();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            db.data_mut()[c] += g.get(r, c);
                        }
                    }
                    self.acc(grads, *gamma, dg);
                    self.acc(grads, *beta, db);
                }
                if self.needs(*x) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dxh = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dxh[c] = g.get(r, c) * gam[c];
                        }
                        let sum: f64 = dxh.iter().sum();
                        let sum_x: f64 = dxh.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        let xr = xhat.row(r);
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv / n * (n * dxh[c] - sum - xr[c] * sum_x);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Attention(c) => self.backward_attention(c, g, grads),
            Op::Gather { src, rows } => {
                let sv = self.value(*src);
                let mut d = Matrix::zeros(sv.rows(), sv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (x, y) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                self.acc(grads, *src, d);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = dot(yr, gr);
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * proj) / norms[r];
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::HardCrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let scale = g.item() / targets.len() as f64;
                let mut d = Matrix::zeros(lv.rows(), lv.cols());
                let mut p = vec![0.0; lv.cols()];
                for &(r, c) in targets {
                    softmax_into(lv.row(r), &mut p);
                    let dr = d.row_mut(r);
                    for (x, pv) in dr.iter_mut().zip(&p) {
                        *x += scale * pv;
                    }
                    dr[c] -= scale;
                }
                self.acc(grads, *logits, d);
            }
            Op::SoftCrossEntropy { logits, targets, rows } => {
                let lv = self.value(*logits);
                let scale = g.item() / rows.len() as f64;
                let mut d = Matrix::zeros(lv.rows(), lv.cols());
                let mut p = vec![0.0; lv.cols()];
                for (i, &r) in rows.iter().enumerate() {
                    softmax_into(lv.row(r), &mut p);
                    let t = targets.row(i);
                    let mass: f64 = t.iter().sum();
                    for ((x, pv), tv) in d.row_mut(r).iter_mut().zip(&p).zip(t) {
                        *x += scale * (pv * mass - tv);
                    }
                }
                self.acc(grads, *logits, d);
            }
            Op::KlDiv { logits, teacher_logp, rows, direction } => {
                let lv = self.value(*logits);
                let scale = g.item() / rows.len() as f64;
                let mut d = Matrix::zeros(lv.rows(), lv.cols());
                let mut p = vec![0.0; lv.cols()];
                for (i, &r) in rows.iter().enumerate() {
                    softmax_into(lv.row(r), &mut p);
                    let tl = teacher_logp.row(i);
                    match direction {
                        KlDirection::TeacherToStudent => {
                            for ((x, pv), &lt) in d.row_mut(r).iter_mut().zip(&p).zip(tl) {
                                *x += scale * (pv - libm::exp(lt));
                            }
                        }
                        KlDirection::StudentToTeacher => {
                            let lse = log_sum_exp(lv.row(r));
                            let row = lv.row(r);
                            let kl: f64 = p.iter().zip(row).zip(tl).map(|((pv, z), lt)| pv * ((z - lse) - lt)).sum();
                            for (((x, pv), z), lt) in d.row_mut(r).iter_mut().zip(&p).zip(row).zip(tl) {
                                *x += scale * pv * ((z - lse) - lt - kl);
                            }
                        }
                    }
                }
                self.acc(grads, *logits, d);
            }
            Op::MseMean { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * g.item() / xv.len().max(1) as f64;
                let data = xv.data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect();
                self.acc(grads, *x, Matrix::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let scale = g.item() / lv.len().max(1) as f64;
                let data = lv.data().iter().zip(targets.data()).map(|(&z, &y)| scale * (sigmoid(z) - y)).collect();
                self.acc(grads, *logits, Matrix::from_vec(lv.rows(), lv.cols(), data));
            }
        }
    }

    fn backward_attention(&self, c: &AttentionCache, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let hidden = qv.cols();
        let dh = hidden / c.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let l = c.seq_len;
        let mut dq = Matrix::zeros(qv.rows(), hidden);
        let mut dk = Matrix::zeros(kv.rows(), hidden);
        let mut dv = Matrix::zeros(vv.rows(), hidden);
        let mut dp = vec![0.0; l];
        for b in 0..c.batch {
            let base = b * l;
            for h in 0..c.heads {
                let off = h * dh;
                for i in 0..l {
                    let prow = &c.probs[((b * c.heads + h) * l + i) * l..][..l];
                    let gi = &g.row(base + i)[off..off + dh];
                    // dV_j += P_ij · dO_i ; dP_ij = dO_i · V_j
                    for j in 0..l {
                        if !c.key_valid[base + j] {
                            dp[j] = 0.0;
                            continue;
                        }
                        let pij = prow[j];
                        let dvj = &mut dv.row_mut(base + j)[off..off + dh];
                        for (x, y) in dvj.iter_mut().zip(gi) {
                            *x += pij * y;
                        }
                        dp[j] = dot(gi, &vv.row(base + j)[off..off + dh]);
                    }
                    let weighted: f64 = prow.iter().zip(&dp).map(|(p, d)| p * d).sum();
                    let qi: alloc::vec::Vec<f64> = qv.row(base + i)[off..off + dh].to_vec();
                    for j in 0..l {
                        if !c.key_valid[base + j] {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj: alloc::vec::Vec<f64> = kv.row(base + j)[off..off + dh].to_vec();
                        for (x, y) in dq.row_mut(base + i)[off..off + dh].iter_mut().zip(&kj) {
                            *x += ds * y;
                        }
                        for (x, y) in dk.row_mut(base + j)[off..off + dh].iter_mut().zip(&qi) {
                            *x += ds * y;
                        }
                    }
                }
            }
        }
        self.acc(grads, c.q, dq);
        self.acc(grads, c.k, dk);
        self.acc(grads, c.v, dv);
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}
