//! Minimal reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value plus whatever it needs for the backward pass. Parameter leaves carry
//! their registry name so [`Graph::backward`] can hand gradients back keyed by
//! name. Nodes that do not depend on a trainable leaf are never visited on the
//! backward pass, which is what keeps frozen sub-networks cheap.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// a + broadcast of a single row b
    AddRow(Var, Var),
    /// a (B·T × n) + b (T × n) repeated B times
    AddTiled(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
    MeanPool {
        x: Var,
        batch: usize,
        seq: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Mat,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients of a scalar with respect to every trainable leaf reached.
pub type Gradients = BTreeMap<String, Mat>;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation, smooth everywhere; 0.5·(1 + tanh(u)) = sigmoid(2u)
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let inner = C * (x + K * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * inner).exp());
    let dinner = C * (1.0 + 3.0 * K * x * x);
    (x * s, s + 2.0 * x * s * (1.0 - s) * dinner)
}

/// Scalar GELU (tanh form).
pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

fn softmax_rows_in_place(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a registry entry. It participates in backward iff the
    /// parameter is flagged trainable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from registry"));
        let var = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[var.0].param = Some(name.to_string());
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Var {
        let t = self.value(tile).nrows();
        let mut value = self.value(a).clone();
        assert_eq!(value.nrows() % t, 0, "add_tiled: rows not a multiple of tile");
        for mut chunk in value.axis_chunks_iter_mut(Axis(0), t) {
            chunk += self.value(tile);
        }
        let rg = self.rg(a) || self.rg(tile);
        self.push(value, Op::AddTiled(a, tile), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Mat) -> Var {
        let value = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, mask), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Batch normalization with batch statistics (training mode). Returns the
    /// output together with the per-column batch mean and biased variance so
    /// callers can update running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = centered;
        for (mut col, is) in xhat.columns_mut().into_iter().zip(&inv_std) {
            col.mapv_inplace(|v| v * is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        (out, mean.to_vec(), var.to_vec())
    }

    /// Multi-head scaled dot-product self-attention over `batch` sequences of
    /// length `seq`, rows laid out sequence-major.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(qv.nrows(), batch * seq);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((batch * seq, d));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![rows.clone(), cols.clone()]);
                let ks = kv.slice(s![rows.clone(), cols.clone()]);
                let vs = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                softmax_rows_in_place(&mut p);
                out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn mean_pool(&mut self, x: Var, batch: usize, seq: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), batch * seq);
        let mut out = Mat::zeros((batch, xv.ncols()));
        for (b, chunk) in xv.axis_chunks_iter(Axis(0), seq).enumerate() {
            out.row_mut(b).assign(&chunk.mean_axis(Axis(0)).expect("seq > 0"));
        }
        let rg = self.rg(x);
        self.push(out, Op::MeanPool { x, batch, seq }, rg)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(value, Op::L2Normalize { x, norms }, rg)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut value = Mat::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&tv.row(id));
        }
        let rg = self.rg(table);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// First `n` rows of `x`, as a differentiable slice (used for positional tables).
    pub fn take_rows(&mut self, x: Var, n: usize) -> Var {
        let ids: Vec<usize> = (0..n).collect();
        self.gather(x, &ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mean softmax cross-entropy of row-wise logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len());
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Gradients of the 1×1 node `loss` with respect to every trainable leaf
    /// that feeds it.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::new();
        if !self.rg(loss) {
            return out;
        }
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        match out.get_mut(name) {
                            Some(acc) => *acc += &g,
                            None => {
                                out.insert(name.clone(), g);
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(self.value(*b));
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = g.t().dot(self.value(*a));
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        self.accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        self.accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddTiled(a, tile) => {
                    if self.rg(*tile) {
                        let t = self.value(*tile).nrows();
                        let mut gt = Mat::zeros(self.value(*tile).raw_dim());
                        for chunk in g.axis_chunks_iter(Axis(0), t) {
                            gt += &chunk;
                        }
                        self.accumulate(&mut grads, *tile, gt);
                    }
                    if self.rg(*a) {
                        self.accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    self.accumulate(&mut grads, *a, g * *s);
                }
                Op::MulConst(a, mask) => {
                    self.accumulate(&mut grads, *a, g * mask);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= gelu_parts(x).1);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(&mut grads, *gamma, gg);
                    }
                    if self.rg(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(&mut grads, *beta, gb);
                    }
                    if self.rg(*x) {
                        let n = xhat.ncols() as f64;
                        let dxhat = &g * self.value(*gamma);
                        let mut gx = Mat::zeros(xhat.raw_dim());
                        for r in 0..xhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let mean_d = dh.sum() / n;
                            let mean_dx = dh.dot(&xh) / n;
                            let is = inv_std[r];
                            Zip::from(gx.row_mut(r))
                                .and(&dh)
                                .and(&xh)
                                .for_each(|o, &d, &h| *o = is * (d - mean_d - h * mean_dx));
                        }
                        self.accumulate(&mut grads, *x, gx);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(&mut grads, *gamma, gg);
                    }
                    if self.rg(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(&mut grads, *beta, gb);
                    }
                    if self.rg(*x) {
                        let n = xhat.nrows() as f64;
                        let dxhat = &g * self.value(*gamma);
                        let mut gx = Mat::zeros(xhat.raw_dim());
                        for c in 0..xhat.ncols() {
                            let dh = dxhat.column(c);
                            let xh = xhat.column(c);
                            let mean_d = dh.sum() / n;
                            let mean_dx = dh.dot(&xh) / n;
                            let is = inv_std[c];
                            Zip::from(gx.column_mut(c))
                                .and(&dh)
                                .and(&xh)
                                .for_each(|o, &d, &h| *o = is * (d - mean_d - h * mean_dx));
                        }
                        self.accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Mat::zeros(qv.raw_dim());
                    let mut gk = Mat::zeros(kv.raw_dim());
                    let mut gv = Mat::zeros(vv.raw_dim());
                    for b in 0..*batch {
                        let rows = b * seq..(b + 1) * seq;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let qs = qv.slice(s![rows.clone(), cols.clone()]);
                            let ks = kv.slice(s![rows.clone(), cols.clone()]);
                            let vs = vv.slice(s![rows.clone(), cols.clone()]);
                            gv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vs.t());
                            let mut ds = &dp * p;
                            for (mut ds_row, (dp_row, p_row)) in
                                ds.rows_mut().into_iter().zip(dp.rows().into_iter().zip(p.rows()))
                            {
                                let dot = dp_row.dot(&p_row);
                                Zip::from(&mut ds_row).and(&p_row).for_each(|o, &pv| *o -= pv * dot);
                            }
                            ds *= scale;
                            gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                            gk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qs));
                        }
                    }
                    if self.rg(*q) {
                        self.accumulate(&mut grads, *q, gq);
                    }
                    if self.rg(*k) {
                        self.accumulate(&mut grads, *k, gk);
                    }
                    if self.rg(*v) {
                        self.accumulate(&mut grads, *v, gv);
                    }
                }
                Op::MeanPool { x, batch, seq } => {
                    let cols = g.ncols();
                    let mut gx = Mat::zeros((batch * seq, cols));
                    let inv = 1.0 / *seq as f64;
                    for (b, mut chunk) in gx.axis_chunks_iter_mut(Axis(0), *seq).enumerate() {
                        let row = g.row(b).mapv(|v| v * inv);
                        chunk += &row;
                    }
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut gx = g;
                    for (r, n) in norms.iter().enumerate() {
                        let dot = gx.row(r).dot(&y.row(r));
                        let yr = y.row(r);
                        Zip::from(gx.row_mut(r)).and(&yr).for_each(|o, &yv| *o = (*o - yv * dot) / n);
                    }
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let mut gt = Mat::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    self.accumulate(&mut grads, *table, gt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        if self.rg(*p) {
                            let gp = g.slice(s![start..start + n, ..]).to_owned();
                            self.accumulate(&mut grads, *p, gp);
                        }
                        start += n;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let scale = g[[0, 0]] / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[[r, y]] -= 1.0;
                    }
                    gl *= scale;
                    self.accumulate(&mut grads, *logits, gl);
                }
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite-difference check of every entry of every parameter.
    fn check<F: Fn(&mut Graph, &ParamStore) -> Var>(store: &ParamStore, f: F) {
        let mut g = Graph::new();
        let loss = f(&mut g, store);
        let grads = g.backward(loss);
        let eps = 1e-5;
        for name in store.names() {
            let analytic = &grads[&name];
            let shape = store.get(&name).unwrap().value.dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut plus = store.clone();
                    plus.get_mut(&name).unwrap().value[[i, j]] += eps;
                    let mut minus = store.clone();
                    minus.get_mut(&name).unwrap().value[[i, j]] -= eps;
                    let mut gp = Graph::new();
                    let lp = f(&mut gp, &plus);
                    let mut gm = Graph::new();
                    let lm = f(&mut gm, &minus);
                    let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * eps);
                    let a = analytic[[i, j]];
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    assert!(err < 1e-5, "{name}[{i},{j}]: analytic {a} numeric {numeric}");
                }
            }
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_607_477_1).abs() < 1e-12);
    }

    #[test]
    fn linear_layernorm_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("w", rand_mat(&mut rng, 4, 3), true);
        store.insert("b", rand_mat(&mut rng, 1, 3), true);
        store.insert("gamma", rand_mat(&mut rng, 1, 3), true);
        store.insert("beta", rand_mat(&mut rng, 1, 3), true);
        let x = rand_mat(&mut rng, 5, 4);
        check(&store, |g, s| {
            let xv = g.constant(x.clone());
            let w = g.param(s, "w");
            let b = g.param(s, "b");
            let h = g.matmul(xv, w);
            let h = g.add_row(h, b);
            let gm = g.param(s, "gamma");
            let bt = g.param(s, "beta");
            let h = g.layer_norm(h, gm, bt);
            let h = g.gelu(h);
            let h = g.l2_normalize(h);
            g.softmax_cross_entropy(h, &[0, 1, 2, 0, 1])
        });
    }

    #[test]
    fn attention_pool_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.insert("table", rand_mat(&mut rng, 6, 4), true);
        store.insert("pos", rand_mat(&mut rng, 3, 4), true);
        store.insert("wq", rand_mat(&mut rng, 4, 4), true);
        store.insert("wk", rand_mat(&mut rng, 4, 4), true);
        store.insert("a", rand_mat(&mut rng, 2, 4), true);
        check(&store, |g, s| {
            let t = g.param(s, "table");
            let x = g.gather(t, &[0, 3, 5, 1, 1, 2]);
            let pos = g.param(s, "pos");
            let x = g.add_tiled(x, pos);
            let wq = g.param(s, "wq");
            let wk = g.param(s, "wk");
            let q = g.matmul(x, wq);
            let k = g.matmul(x, wk);
            let att = g.attention(q, k, x, 2, 3, 2);
            let pooled = g.mean_pool(att, 2, 3);
            let a = g.param(s, "a");
            let lora = g.matmul_nt(pooled, a);
            let lora = g.scale(lora, 0.7);
            let extra = g.concat_rows(&[lora, lora]);
            g.softmax_cross_entropy(extra, &[1, 0, 0, 1])
        });
    }

    #[test]
    fn batch_norm_and_mask_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("w", rand_mat(&mut rng, 3, 4), true);
        store.insert("gamma", rand_mat(&mut rng, 1, 4), true);
        store.insert("beta", rand_mat(&mut rng, 1, 4), true);
        let x = rand_mat(&mut rng, 6, 3);
        let mask = array![
            [2.0, 0.0, 2.0, 2.0],
            [0.0, 2.0, 2.0, 0.0],
            [2.0, 2.0, 0.0, 2.0],
            [2.0, 2.0, 2.0, 2.0],
            [0.0, 0.0, 2.0, 2.0],
            [2.0, 0.0, 0.0, 2.0]
        ];
        check(&store, |g, s| {
            let xv = g.constant(x.clone());
            let w = g.param(s, "w");
            let h = g.matmul(xv, w);
            let gm = g.param(s, "gamma");
            let bt = g.param(s, "beta");
            let (h, _, _) = g.batch_norm_train(h, gm, bt);
            let h = g.mul_const(h, mask.clone());
            let h = g.add(h, h);
            g.softmax_cross_entropy(h, &[0, 1, 2, 3, 0, 1])
        });
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("frozen", Mat::eye(2), false);
        store.insert("live", Mat::eye(2), true);
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0]]);
        let f = g.param(&store, "frozen");
        let l = g.param(&store, "live");
        let h = g.matmul(x, f);
        let h = g.matmul(h, l);
        let loss = g.softmax_cross_entropy(h, &[0]);
        let grads = g.backward(loss);
        assert!(grads.contains_key("live"));
        assert!(!grads.contains_key("frozen"));
    }
}
