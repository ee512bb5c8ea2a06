//! Reverse-mode differentiation over a per-step tape.
//!
//! Layouts are channels-last: images are `[N, H, W, C]` and token sets are `[N, T, C]`.

use std::f64::consts::PI;

use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Rows of `[.., C]` viewed as a matrix `rows x C`.
    fn rows_cols(&self) -> (usize, usize) {
        let c = *self.shape.last().unwrap_or(&1);
        (self.data.len() / c.max(1), c)
    }

    /// Selects entries `idx` along the first axis.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }
}

/// `c (m x n) = a (m x k) * b (k x n)` with arbitrary strides; accumulates when `acc`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), c: &mut [f64], acc: bool) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !acc {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices that cover the strided extents implied by m, k, n.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

const ROW: fn(usize) -> (isize, isize) = |cols| (cols as isize, 1);
const TRANS: fn(usize) -> (isize, isize) = |cols| (1, cols as isize);

const GELU_A: f64 = 0.044715;

const NORM_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    let s = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / PI).sqrt();
    let t = (s * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax of `logits` (`rows x k`) at temperature `tau`.
pub fn softmax(logits: &[f64], k: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
        let mut s = 0.0;
        for (oi, &z) in o.iter_mut().zip(row) {
            *oi = (z / tau - m).exp();
            s += *oi;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    ChannelMap { x: Var, w: Var },
    TokenMap { w: Var, x: Var },
    BiasLast { x: Var, b: Var },
    BiasToken { x: Var, b: Var },
    Gelu { x: Var },
    ChannelNorm { x: Var, inv_std: Vec<f64> },
    Add { a: Var, b: Var },
    Reshape { x: Var },
    Conv3x3 { x: Var, w: Var, b: Var, cols: Vec<f64> },
    AvgPool2 { x: Var },
    MeanTokens { x: Var },
    /// Scalar loss with its gradient with respect to `x` already computed.
    Loss { x: Var, grad: Vec<f64> },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `x [.., C] * w [C, D] -> [.., D]`.
    pub fn channel_map(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (rows, c) = xv.rows_cols();
        assert_eq!(wv.shape, [c, wv.shape[1]], "channel_map: weight rows must match channels");
        let d = wv.shape[1];
        let mut out = vec![0.0; rows * d];
        gemm(rows, c, d, &xv.data, ROW(c), &wv.data, ROW(d), &mut out, false);
        let mut shape = xv.shape.clone();
        *shape.last_mut().expect("rank >= 1") = d;
        let ng = self.ng(&[x, w]);
        self.push(Tensor { shape, data: out }, Op::ChannelMap { x, w }, ng)
    }

    /// `w [T', T]` applied to each `x[n] (T x C)` -> `[N, T', C]`.
    pub fn token_map(&mut self, w: Var, x: Var) -> Var {
        let (wv, xv) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        assert_eq!(xv.shape.len(), 3, "token_map expects [N, T, C]");
        let (n, t, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        assert_eq!(wv.shape[1], t, "token_map: weight columns must match tokens");
        let tp = wv.shape[0];
        let mut out = vec![0.0; n * tp * c];
        for i in 0..n {
            gemm(tp, t, c, &wv.data, ROW(t), &xv.data[i * t * c..], ROW(c), &mut out[i * tp * c..], false);
        }
        let ng = self.ng(&[w, x]);
        self.push(Tensor { shape: vec![n, tp, c], data: out }, Op::TokenMap { w, x }, ng)
    }

    /// Adds `b [C]` to every row of `x [.., C]`.
    pub fn bias_last(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (_, c) = xv.rows_cols();
        assert_eq!(bv.len(), c, "bias_last: bias length must match channels");
        let mut out = xv.clone();
        for row in out.data.chunks_mut(c) {
            row.iter_mut().zip(&bv.data).for_each(|(o, b)| *o += b);
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::BiasLast { x, b }, ng)
    }

    /// Adds `b[t]` to every channel of token `t` in `x [N, T, C]`.
    pub fn bias_token(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (t, c) = (xv.shape[1], xv.shape[2]);
        assert_eq!(bv.len(), t, "bias_token: bias length must match tokens");
        let mut out = xv.clone();
        for (i, row) in out.data.chunks_mut(c).enumerate() {
            let bt = bv.data[i % t];
            row.iter_mut().for_each(|o| *o += bt);
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::BiasToken { x, b }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|&v| gelu(v)).collect() };
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu { x }, ng)
    }

    /// Zero mean, unit variance over the last axis, no affine parameters.
    pub fn channel_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (_, c) = xv.rows_cols();
        let mut data = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.len() / c.max(1));
        for row in xv.data.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let out = Tensor { shape: xv.shape.clone(), data };
        let ng = self.ng(&[x]);
        self.push(out, Op::ChannelNorm { x, inv_std }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape, bv.shape, "add: shapes differ");
        let out = Tensor { shape: av.shape.clone(), data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect() };
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), shape.iter().product::<usize>(), "reshape: element count differs");
        let out = Tensor { shape: shape.to_vec(), data: xv.data.clone() };
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape { x }, ng)
    }

    /// Same-padded 3x3 convolution: `x [N, H, W, C]`, `w [9C, O]` with rows ordered
    /// `(dy, dx, c)`, `b [O]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, h, wd, c) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let wv = &self.nodes[w.0].value;
        assert_eq!(wv.shape[0], 9 * c, "conv3x3: weight rows must be 9 x channels");
        let o = wv.shape[1];
        let rows = n * h * wd;
        let mut cols = vec![0.0; rows * 9 * c];
        for img in 0..n {
            for y in 0..h {
                for xx in 0..wd {
                    let r = (img * h + y) * wd + xx;
                    let dst = &mut cols[r * 9 * c..(r + 1) * 9 * c];
                    for dy in 0..3 {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let sx = xx as isize + dx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            let src = ((img * h + sy as usize) * wd + sx as usize) * c;
                            let k = (dy * 3 + dx) * c;
                            dst[k..k + c].copy_from_slice(&xv.data[src..src + c]);
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; rows * o];
        gemm(rows, 9 * c, o, &cols, ROW(9 * c), &wv.data, ROW(o), &mut out, false);
        let bv = &self.nodes[b.0].value;
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(&bv.data).for_each(|(v, b)| *v += b);
        }
        let ng = self.ng(&[x, w, b]);
        self.push(Tensor { shape: vec![n, h, wd, o], data: out }, Op::Conv3x3 { x, w, b, cols }, ng)
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, h, w, c) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * ho * wo * c];
        for img in 0..n {
            for y in 0..ho {
                for xx in 0..wo {
                    let o = ((img * ho + y) * wo + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((img * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += 0.25 * xv.data[s + ch];
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor { shape: vec![n, ho, wo, c], data: out }, Op::AvgPool2 { x }, ng)
    }

    /// Mean over the token axis: `[N, T, C] -> [N, C]`.
    pub fn mean_tokens(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, t, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..t {
                let s = (i * t + j) * c;
                for ch in 0..c {
                    out[i * c + ch] += xv.data[s + ch] / t as f64;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor { shape: vec![n, c], data: out }, Op::MeanTokens { x }, ng)
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        let (n, k) = (lv.shape[0], lv.shape[1]);
        assert_eq!(labels.len(), n, "cross_entropy: one label per row");
        let p = softmax(&lv.data, k, 1.0);
        let mut grad = p;
        for (i, &y) in labels.iter().enumerate() {
            grad[i * k + y] -= 1.0;
        }
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        grad.iter_mut().for_each(|g| *g /= n as f64);
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(loss / n as f64), Op::Loss { x: logits, grad }, ng)
    }

    /// `tau^2`-scaled KL divergence from the softened teacher to the softened student,
    /// averaged over the batch.
    pub fn kd_loss(&mut self, student: Var, teacher_logits: &Tensor, tau: f64) -> Var {
        let sv = &self.nodes[student.0].value;
        assert_eq!(sv.shape, teacher_logits.shape, "kd_loss: student and teacher shapes differ");
        let (n, k) = (sv.shape[0], sv.shape[1]);
        let ps = softmax(&sv.data, k, tau);
        let pt = softmax(&teacher_logits.data, k, tau);
        let mut loss = 0.0;
        for i in 0..n {
            let (zs, zt) = (&sv.data[i * k..(i + 1) * k], &teacher_logits.data[i * k..(i + 1) * k]);
            let lse = |z: &[f64]| {
                let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
                m + z.iter().map(|v| (v / tau - m).exp()).sum::<f64>().ln()
            };
            let (ls, lt) = (lse(zs), lse(zt));
            for j in 0..k {
                let p = pt[i * k + j];
                if p > 0.0 {
                    loss += p * ((zt[j] / tau - lt) - (zs[j] / tau - ls));
                }
            }
        }
        let grad: Vec<f64> = ps.iter().zip(&pt).map(|(s, t)| tau * (s - t) / n as f64).collect();
        let ng = self.ng(&[student]);
        self.push(Tensor::scalar(tau * tau * loss / n as f64), Op::Loss { x: student, grad }, ng)
    }

    /// `sum_i coef_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|(t, c)| c * self.nodes[t.0].value.item()).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        self.push(Tensor::scalar(v), Op::WeightedSum { terms: terms.to_vec() }, ng)
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor { shape: self.nodes[root.0].value.shape.clone(), data: vec![1.0; self.nodes[root.0].value.len()] });
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&node.value.shape));
        f(&mut slot.data, &node.value);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::ChannelMap { x, w } => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (rows, c) = xv.rows_cols();
                let d = wv.shape[1];
                self.accumulate(grads, *x, |gx, _| gemm(rows, d, c, &g.data, ROW(d), &wv.data, TRANS(d), gx, true));
                self.accumulate(grads, *w, |gw, _| gemm(c, rows, d, &xv.data, TRANS(c), &g.data, ROW(d), gw, true));
            }
            Op::TokenMap { w, x } => {
                let (wv, xv) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
                let (n, t, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let tp = wv.shape[0];
                self.accumulate(grads, *x, |gx, _| {
                    for i in 0..n {
                        gemm(t, tp, c, &wv.data, TRANS(t), &g.data[i * tp * c..], ROW(c), &mut gx[i * t * c..], true);
                    }
                });
                self.accumulate(grads, *w, |gw, _| {
                    for i in 0..n {
                        gemm(tp, c, t, &g.data[i * tp * c..], ROW(c), &xv.data[i * t * c..], TRANS(c), gw, true);
                    }
                });
            }
            Op::BiasLast { x, b } => {
                self.accumulate(grads, *x, |gx, _| gx.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b));
                self.accumulate(grads, *b, |gb, bv| {
                    let c = bv.len();
                    for row in g.data.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::BiasToken { x, b } => {
                self.accumulate(grads, *x, |gx, _| gx.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b));
                let c = self.nodes[x.0].value.shape[2];
                self.accumulate(grads, *b, |gb, bv| {
                    let t = bv.len();
                    for (i, row) in g.data.chunks(c).enumerate() {
                        gb[i % t] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Gelu { x } => {
                self.accumulate(grads, *x, |gx, xv| {
                    for ((a, gi), v) in gx.iter_mut().zip(&g.data).zip(&xv.data) {
                        *a += gi * gelu_grad(*v);
                    }
                });
            }
            Op::ChannelNorm { x, inv_std } => {
                let c = node.value.shape.last().copied().unwrap_or(1);
                self.accumulate(grads, *x, |gx, _| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let (gr, yr) = (&g.data[r * c..(r + 1) * c], &node.value.data[r * c..(r + 1) * c]);
                        let gm = gr.iter().sum::<f64>() / c as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for k in 0..c {
                            gx[r * c + k] += inv * (gr[k] - gm - yr[k] * gy);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |gx, _| gx.iter_mut().zip(&g.data).for_each(|(p, q)| *p += q));
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |gx, _| gx.iter_mut().zip(&g.data).for_each(|(p, q)| *p += q));
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let xv = &self.nodes[x.0].value;
                let (n, h, wd, c) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
                let wv = &self.nodes[w.0].value;
                let o = wv.shape[1];
                let rows = n * h * wd;
                self.accumulate(grads, *w, |gw, _| gemm(9 * c, rows, o, cols, TRANS(9 * c), &g.data, ROW(o), gw, true));
                self.accumulate(grads, *b, |gb, _| {
                    for row in g.data.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
                self.accumulate(grads, *x, |gx, _| {
                    let mut gcols = vec![0.0; rows * 9 * c];
                    gemm(rows, o, 9 * c, &g.data, ROW(o), &wv.data, TRANS(o), &mut gcols, false);
                    for img in 0..n {
                        for y in 0..h {
                            for xx in 0..wd {
                                let r = (img * h + y) * wd + xx;
                                let src = &gcols[r * 9 * c..(r + 1) * 9 * c];
                                for dy in 0..3 {
                                    let sy = y as isize + dy as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..3 {
                                        let sx = xx as isize + dx as isize - 1;
                                        if sx < 0 || sx >= wd as isize {
                                            continue;
                                        }
                                        let dst = ((img * h + sy as usize) * wd + sx as usize) * c;
                                        let k = (dy * 3 + dx) * c;
                                        for ch in 0..c {
                                            gx[dst + ch] += src[k + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2 { x } => {
                self.accumulate(grads, *x, |gx, xv| {
                    let (n, h, w, c) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    for img in 0..n {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let o = ((img * ho + y) * wo + xx) * c;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let s = ((img * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                                    for ch in 0..c {
                                        gx[s + ch] += 0.25 * g.data[o + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanTokens { x } => {
                self.accumulate(grads, *x, |gx, xv| {
                    let (n, t, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                    for i in 0..n {
                        for j in 0..t {
                            let s = (i * t + j) * c;
                            for ch in 0..c {
                                gx[s + ch] += g.data[i * c + ch] / t as f64;
                            }
                        }
                    }
                });
            }
            Op::Loss { x, grad } => {
                let s = g.item();
                self.accumulate(grads, *x, |gx, _| gx.iter_mut().zip(grad).for_each(|(p, q)| *p += s * q));
            }
            Op::WeightedSum { terms } => {
                let s = g.item();
                for (t, c) in terms {
                    self.accumulate(grads, *t, |gx, _| gx[0] += s * c);
                }
            }
        }
    }
}
