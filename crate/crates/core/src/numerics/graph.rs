//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in topological order, so [`Graph::backward`] is a
//! single reverse sweep over the tape. Leaves created with
//! `requires_grad = false` (and everything derived only from them) are
//! skipped during the sweep.

use super::tensor::{gemm, softmax_rows_in_place, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `out[i, :] = a[i, :] * s[i]`
    MulColumn(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Sum(Var),
    SumRows(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    TopKGate {
        weights: Var,
        idx: Vec<usize>,
        k: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.rank2("matmul", a)?;
        let (k2, m) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            m as isize,
            1,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Scales row `i` of `a` by `s[i]`; `s` holds one value per row.
    pub fn mul_column(&mut self, a: Var, s: Var) -> Result<Var> {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        if self.value(s).numel() != rows {
            return Err(Error::dim("mul_column", self.shape(a), self.shape(s)));
        }
        let scale = self.data(s);
        let mut out = self.data(a).to_vec();
        for (row, &c) in out.chunks_mut(cols.max(1)).zip(scale) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::MulColumn(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x / (1.0 + (-x).exp()));
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Column sums: `(rows × cols) -> (1 × cols)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let cols = self.value(a).cols();
        let mut out = vec![0.0; cols];
        for row in self.data(a).chunks(cols.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        self.push(Tensor::from_parts(vec![1, cols], out), Op::SumRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let mut t = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        t.set_requires_grad(false);
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let mut out = self.data(x).to_vec();
        softmax_rows_in_place(&mut out, self.value(x).cols(), temperature);
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(t, Op::Softmax { x, temperature }, &[x]))
    }

    /// Selects rows of `src` (embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = (self.value(src).rows(), self.value(src).cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let data = self.data(src);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::from_parts(vec![idx.len(), cols], out);
        Ok(self.push(
            t,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        ))
    }

    /// `out` has `rows` rows; row `i` of `src` is added into `out[idx[i]]`.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, cols) = (self.value(src).rows(), self.value(src).cols());
        if idx.len() != n || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim("scatter_rows", self.shape(src), &[idx.len(), rows]));
        }
        let mut out = vec![0.0; rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            let s = &self.data(src)[r * cols..(r + 1) * cols];
            out[i * cols..(i + 1) * cols]
                .iter_mut()
                .zip(s)
                .for_each(|(o, v)| *o += v);
        }
        let t = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(
            t,
            Op::ScatterRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        ))
    }

    /// Layer normalization over the last dimension with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        let (g, b) = (self.data(gamma), self.data(beta));
        for r in 0..rows {
            let row = &self.data(x)[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= cols) {
            return Err(Error::Input(format!("target {bad} out of range for {cols} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        softmax_rows_in_place(&mut probs, cols, 1.0);
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= probs[r * cols + t].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Multi-head causal self-attention over `(batch·seq) × hidden` inputs.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (rows, hidden) = self.rank2("causal_attention", q)?;
        if rows != batch * seq || heads == 0 || hidden % heads != 0 {
            return Err(Error::dim("causal_attention", self.shape(q), &[batch, seq, heads]));
        }
        let d = hidden / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * hidden];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * d;
                for t in 0..seq {
                    let qrow = &qd[(b * seq + t) * hidden + off..][..d];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let krow = &kd[(b * seq + s) * hidden + off..][..d];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        scores[s] = dot * scale;
                        max = max.max(scores[s]);
                    }
                    let mut sum = 0.0;
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    let p = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                    let orow = &mut out[(b * seq + t) * hidden + off..][..d];
                    for s in 0..=t {
                        p[s] = scores[s] / sum;
                        let vrow = &vd[(b * seq + s) * hidden + off..][..d];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += p[s] * x);
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![rows, hidden], out);
        Ok(self.push(
            t,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Renormalized routing weights of the selected experts.
    ///
    /// `idx` is row-major `(rows × k)`; output row `i` holds
    /// `w[i, idx[i, j]] / Σ_j w[i, idx[i, j]]`.
    pub fn top_k_gate(&mut self, weights: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (rows, cols) = (self.value(weights).rows(), self.value(weights).cols());
        if k == 0 || idx.len() != rows * k || idx.iter().any(|&e| e >= cols) {
            return Err(Error::dim("top_k_gate", self.shape(weights), &[idx.len(), k]));
        }
        let w = self.data(weights);
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            let sel = &idx[r * k..(r + 1) * k];
            let s: f64 = sel.iter().map(|&e| w[r * cols + e]).sum();
            for (j, &e) in sel.iter().enumerate() {
                out[r * k + j] = w[r * cols + e] / s;
            }
        }
        let t = Tensor::from_parts(vec![rows, k], out);
        Ok(self.push(
            t,
            Op::TopKGate {
                weights,
                idx: idx.to_vec(),
                k,
            },
            &[weights],
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if self.needs(v) {
            add_into(&mut grads[v.0], g);
        }
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, gout, m as isize, 1, self.data(*b), 1, m as isize, &mut da, 0.0);
                    self.send(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, self.data(*a), 1, k as isize, gout, m as isize, 1, &mut db, 0.0);
                    self.send(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, gout);
                self.send(grads, *b, gout);
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, gout);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                self.send(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let g: Vec<f64> = gout.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    self.send(grads, *a, &g);
                }
                if self.needs(*b) {
                    let g: Vec<f64> = gout.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    self.send(grads, *b, &g);
                }
            }
            Op::MulColumn(a, s) => {
                let cols = self.value(*a).cols().max(1);
                let scale = self.data(*s);
                if self.needs(*a) {
                    let mut g = gout.to_vec();
                    for (row, &c) in g.chunks_mut(cols).zip(scale) {
                        row.iter_mut().for_each(|v| *v *= c);
                    }
                    self.send(grads, *a, &g);
                }
                if self.needs(*s) {
                    let g: Vec<f64> = gout
                        .chunks(cols)
                        .zip(self.data(*a).chunks(cols))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    self.send(grads, *s, &g);
                }
            }
            Op::Scale(a, c) => {
                let g: Vec<f64> = gout.iter().map(|g| g * c).collect();
                self.send(grads, *a, &g);
            }
            Op::Abs(a) => {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                self.send(grads, *a, &g);
            }
            Op::Sum(a) => {
                let g = vec![gout[0]; self.value(*a).numel()];
                self.send(grads, *a, &g);
            }
            Op::SumRows(a) => {
                let g: Vec<f64> = (0..self.value(*a).rows()).flat_map(|_| gout.iter().copied()).collect();
                self.send(grads, *a, &g);
            }
            Op::Reshape(a) => self.send(grads, *a, gout),
            Op::Softmax { x, temperature } => {
                let y = node.value.data();
                let cols = node.value.cols().max(1);
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dy) in g.chunks_mut(cols).zip(y.chunks(cols)).zip(gout.chunks(cols)) {
                    let dot: f64 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gr[c] = temperature * yr[c] * (dy[c] - dot);
                    }
                }
                self.send(grads, *x, &g);
            }
            Op::GatherRows { src, idx } => {
                let cols = self.value(*src).cols();
                let mut g = vec![0.0; self.value(*src).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    g[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&gout[r * cols..(r + 1) * cols])
                        .for_each(|(o, v)| *o += v);
                }
                self.send(grads, *src, &g);
            }
            Op::ScatterRows { src, idx } => {
                let cols = self.value(*src).cols();
                let mut g = Vec::with_capacity(idx.len() * cols);
                for &i in idx {
                    g.extend_from_slice(&gout[i * cols..(i + 1) * cols]);
                }
                self.send(grads, *src, &g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gam = self.data(*gamma);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for (gr, hr) in gout.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                        }
                    }
                    self.send(grads, *gamma, &dg);
                    self.send(grads, *beta, &db);
                }
                if self.needs(*x) {
                    let n = cols as f64;
                    let mut dx = vec![0.0; gout.len()];
                    for r in 0..inv_std.len() {
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            dx[r * cols + c] = inv_std[r] / n * (n * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    self.send(grads, *x, &dx);
                }
            }
            Op::Silu(a) => {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.send(grads, *a, &g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let cols = self.value(*logits).cols();
                let mut g = vec![0.0; probs.len()];
                if *count > 0 {
                    let c = gout[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..cols {
                                g[r * cols + j] = c * probs[r * cols + j];
                            }
                            g[r * cols + t] -= c;
                        }
                    }
                }
                self.send(grads, *logits, &g);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let hidden = self.shape(*q)[1];
                let d = hidden / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * d;
                        for t in 0..seq {
                            let p = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                            let go = &gout[(b * seq + t) * hidden + off..][..d];
                            let mut dot = 0.0;
                            for s in 0..=t {
                                let vrow = (b * seq + s) * hidden + off;
                                dp[s] = go.iter().zip(&vd[vrow..vrow + d]).map(|(a, b)| a * b).sum();
                                dot += p[s] * dp[s];
                                dv[vrow..vrow + d]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(o, g)| *o += p[s] * g);
                            }
                            let qrow = (b * seq + t) * hidden + off;
                            for s in 0..=t {
                                let ds = p[s] * (dp[s] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (b * seq + s) * hidden + off;
                                for c in 0..d {
                                    dq[qrow + c] += ds * kd[krow + c];
                                    dk[krow + c] += ds * qd[qrow + c];
                                }
                            }
                        }
                    }
                }
                self.send(grads, *q, &dq);
                self.send(grads, *k, &dk);
                self.send(grads, *v, &dv);
            }
            Op::TopKGate { weights, idx, k } => {
                let cols = self.value(*weights).cols();
                let w = self.data(*weights);
                let gate = node.value.data();
                let mut g = vec![0.0; w.len()];
                for r in 0..node.value.rows() {
                    let sel = &idx[r * k..(r + 1) * k];
                    let s: f64 = sel.iter().map(|&e| w[r * cols + e]).sum();
                    let dot: f64 = (0..*k).map(|j| gout[r * k + j] * gate[r * k + j]).sum();
                    for (j, &e) in sel.iter().enumerate() {
                        g[r * cols + e] += (gout[r * k + j] - dot) / s;
                    }
                }
                self.send(grads, *weights, &g);
            }
        }
    }
}
