//! Minimal reverse-mode autodiff tape.
//!
//! Define-by-run: forward values are computed as nodes are recorded, and
//! `backward` walks the nodes in reverse creation order. The op set is
//! exactly what codebook training needs — matmul, causal softmax
//! attention, RMSNorm, SiLU, elementwise arithmetic, codebook gather,
//! embedding lookup, and the two loss heads. Scalars are generic so the
//! same graph runs in f32 for training and f64 for finite-difference
//! gradient checks.
//!
//! Shape violations are programmer errors and panic; callers validate
//! user-facing inputs before building a graph.

use std::sync::Arc;

/// Scalar for tape arithmetic, implemented by `f32` and `f64`.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense 2-D tensor of tape scalars, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::ZERO; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape mismatch");
        Self { rows, cols, data }
    }

    pub fn from_f32_slice(rows: usize, cols: usize, data: &[f32]) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape mismatch");
        Self {
            rows,
            cols,
            data: data.iter().map(|&v| F::from_f32(v)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f64() as f32).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<F> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: F,
    },
    Silu {
        a: NodeId,
    },
    RmsNorm {
        x: NodeId,
        w: NodeId,
        inv_rms: Vec<F>,
    },
    /// Per-(batch, head) scaled dot products Q Kᵀ / sqrt(head_dim).
    AttnScores {
        q: NodeId,
        k: NodeId,
        batch: usize,
        heads: usize,
    },
    /// Row-wise softmax over the causal prefix; masked entries are zero.
    CausalSoftmax {
        a: NodeId,
        seq: usize,
    },
    /// Per-(batch, head) probs x V, heads re-concatenated.
    AttnContext {
        p: NodeId,
        v: NodeId,
        batch: usize,
        heads: usize,
    },
    /// Codebook gather into a dense `d_in x d_out` weight (pad sliced off).
    GatherWeight {
        codebook: NodeId,
        codes: Arc<Vec<u16>>,
        d_in: usize,
        d_out: usize,
        deficiency: usize,
    },
    Embed {
        table: NodeId,
        ids: Arc<Vec<u16>>,
    },
    MeanSquaredError {
        pred: NodeId,
        target: Tensor<F>,
    },
    /// Mean cross-entropy; `IGNORE_TARGET` rows are skipped.
    CrossEntropy {
        logits: NodeId,
        targets: Arc<Vec<u16>>,
        probs: Tensor<F>,
        counted: usize,
    },
}

/// Sentinel target excluded from the cross-entropy mean.
pub const IGNORE_TARGET: u16 = u16::MAX;

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Gradient from the last backward pass; zeros if the node was unused.
    pub fn grad(&self, id: NodeId) -> Tensor<F> {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = (self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
        let (kb, n) = (self.nodes[b.0].value.rows, self.nodes[b.0].value.cols);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = Tensor::zeros(m, n);
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        self.push(out, Op::Matmul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shape");
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_rows(av.rows, av.cols, data);
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "mul shape");
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_rows(av.rows, av.cols, data);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|&x| x * c).collect();
        let out = Tensor::from_rows(av.rows, av.cols, data);
        self.push(out, Op::Scale { a, c })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av
            .data
            .iter()
            .map(|&x| {
                let sig = F::ONE / (F::ONE + (-x).exp());
                x * sig
            })
            .collect();
        let out = Tensor::from_rows(av.rows, av.cols, data);
        self.push(out, Op::Silu { a })
    }

    /// Row-wise RMS normalization scaled by a learned weight vector.
    pub fn rms_norm(&mut self, x: NodeId, w: NodeId, eps: f32) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(wv.rows, 1, "norm weight is a row vector");
        assert_eq!(wv.cols, xv.cols, "norm weight length");
        let d = xv.cols;
        let eps = F::from_f32(eps);
        let inv_d = F::ONE / F::from_f64(d as f64);
        let mut inv_rms = Vec::with_capacity(xv.rows);
        let mut out = Tensor::zeros(xv.rows, d);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mut ms = F::ZERO;
            for &v in row {
                ms += v * v;
            }
            ms = ms * inv_d + eps;
            let inv = F::ONE / ms.sqrt();
            inv_rms.push(inv);
            for c in 0..d {
                out.data[r * d + c] = row[c] * inv * wv.data[c];
            }
        }
        self.push(out, Op::RmsNorm { x, w, inv_rms })
    }

    /// Attention logits for `batch` sequences and `heads` heads. `q` and
    /// `k` are `[batch*seq, dim]`; the result is `[batch*heads*seq, seq]`,
    /// scaled by 1/sqrt(head_dim).
    pub fn attn_scores(&mut self, q: NodeId, k: NodeId, batch: usize, heads: usize) -> NodeId {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        assert_eq!((qv.rows, qv.cols), (kv.rows, kv.cols), "q/k shape");
        let dim = qv.cols;
        assert_eq!(dim % heads, 0, "dim divisible by heads");
        assert_eq!(qv.rows % batch, 0, "rows divisible by batch");
        let seq = qv.rows / batch;
        let hd = dim / heads;
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());
        let mut out = Tensor::zeros(batch * heads * seq, seq);
        for b in 0..batch {
            for h in 0..heads {
                for tq in 0..seq {
                    let qrow = &qv.row(b * seq + tq)[h * hd..(h + 1) * hd];
                    let out_row = (b * heads + h) * seq + tq;
                    for tk in 0..seq {
                        let krow = &kv.row(b * seq + tk)[h * hd..(h + 1) * hd];
                        let mut dot = F::ZERO;
                        for (x, y) in qrow.iter().zip(krow) {
                            dot += *x * *y;
                        }
                        out.data[out_row * seq + tk] = dot * scale;
                    }
                }
            }
        }
        self.push(out, Op::AttnScores { q, k, batch, heads })
    }

    /// Softmax over each row's causal prefix (row r attends to keys
    /// `0..=(r % seq)`); entries beyond the prefix are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId, seq: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.cols, seq, "score columns == seq");
        assert_eq!(av.rows % seq, 0, "score rows divisible by seq");
        let mut out = Tensor::zeros(av.rows, seq);
        for r in 0..av.rows {
            let allowed = (r % seq) + 1;
            let row = av.row(r);
            let mut mx = row[0];
            for &v in &row[1..allowed] {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = F::ZERO;
            for c in 0..allowed {
                let e = (row[c] - mx).exp();
                out.data[r * seq + c] = e;
                denom += e;
            }
            for c in 0..allowed {
                out.data[r * seq + c] = out.data[r * seq + c] / denom;
            }
        }
        self.push(out, Op::CausalSoftmax { a, seq })
    }

    /// Apply attention probabilities to values per (batch, head) and
    /// re-concatenate heads: `[batch*heads*seq, seq] x [batch*seq, dim]
    /// -> [batch*seq, dim]`.
    pub fn attn_context(&mut self, p: NodeId, v: NodeId, batch: usize, heads: usize) -> NodeId {
        let pv = &self.nodes[p.0].value;
        let vv = &self.nodes[v.0].value;
        let dim = vv.cols;
        assert_eq!(dim % heads, 0);
        let hd = dim / heads;
        assert_eq!(vv.rows % batch, 0);
        let seq = vv.rows / batch;
        assert_eq!(pv.rows, batch * heads * seq, "prob rows");
        assert_eq!(pv.cols, seq, "prob cols");
        let mut out = Tensor::zeros(batch * seq, dim);
        for b in 0..batch {
            for h in 0..heads {
                for tq in 0..seq {
                    let prow = pv.row((b * heads + h) * seq + tq);
                    let orow = (b * seq + tq) * dim + h * hd;
                    for tk in 0..=tq {
                        let w = prow[tk];
                        let vrow = &vv.row(b * seq + tk)[h * hd..(h + 1) * hd];
                        for (j, &x) in vrow.iter().enumerate() {
                            out.data[orow + j] += w * x;
                        }
                    }
                }
            }
        }
        self.push(out, Op::AttnContext { p, v, batch, heads })
    }

    /// Reconstruct a dense weight from a codebook leaf and fixed codes;
    /// gradients accumulate into the shared centroid rows.
    pub fn gather_weight(
        &mut self,
        codebook: NodeId,
        codes: Arc<Vec<u16>>,
        d_in: usize,
        d_out: usize,
        deficiency: usize,
    ) -> NodeId {
        let cb = &self.nodes[codebook.0].value;
        let g = cb.cols;
        let padded = d_out + deficiency;
        assert_eq!(padded % g, 0, "padded width divisible by g");
        let groups_per_row = padded / g;
        assert_eq!(codes.len(), d_in * groups_per_row, "code count");
        let mut out = Tensor::zeros(d_in, d_out);
        for r in 0..d_in {
            let mut written = 0usize;
            for gi in 0..groups_per_row {
                let code = codes[r * groups_per_row + gi] as usize;
                assert!(code < cb.rows, "code out of range");
                let take = g.min(d_out - written);
                let crow = cb.row(code);
                out.data[r * d_out + written..r * d_out + written + take]
                    .copy_from_slice(&crow[..take]);
                written += take;
            }
        }
        self.push(
            out,
            Op::GatherWeight {
                codebook,
                codes,
                d_in,
                d_out,
                deficiency,
            },
        )
    }

    /// Row lookup into an embedding table.
    pub fn embed(&mut self, table: NodeId, ids: Arc<Vec<u16>>) -> NodeId {
        let tv = &self.nodes[table.0].value;
        let d = tv.cols;
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            assert!((id as usize) < tv.rows, "token id out of range");
            out.data[r * d..(r + 1) * d].copy_from_slice(tv.row(id as usize));
        }
        self.push(out, Op::Embed { table, ids })
    }

    /// Mean squared error against a constant target, over all elements.
    pub fn mse(&mut self, pred: NodeId, target: Tensor<F>) -> NodeId {
        let pv = &self.nodes[pred.0].value;
        assert_eq!((pv.rows, pv.cols), (target.rows, target.cols), "mse shape");
        let n = F::from_f64(pv.data.len() as f64);
        let mut acc = F::ZERO;
        for (&p, &t) in pv.data.iter().zip(&target.data) {
            let d = p - t;
            acc += d * d;
        }
        let out = Tensor::from_rows(1, 1, vec![acc / n]);
        self.push(out, Op::MeanSquaredError { pred, target })
    }

    /// Mean cross-entropy of row-wise logits against integer targets;
    /// rows whose target is [`IGNORE_TARGET`] are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Arc<Vec<u16>>) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.rows, targets.len(), "one target per row");
        let v = lv.cols;
        let mut probs = Tensor::zeros(lv.rows, v);
        let mut acc = F::ZERO;
        let mut counted = 0usize;
        for r in 0..lv.rows {
            let row = lv.row(r);
            let mut mx = row[0];
            for &x in &row[1..] {
                if x > mx {
                    mx = x;
                }
            }
            let mut denom = F::ZERO;
            for c in 0..v {
                let e = (row[c] - mx).exp();
                probs.data[r * v + c] = e;
                denom += e;
            }
            for c in 0..v {
                probs.data[r * v + c] = probs.data[r * v + c] / denom;
            }
            let t = targets[r];
            if t != IGNORE_TARGET {
                assert!((t as usize) < v, "target out of range");
                acc += denom.ln() + mx - row[t as usize];
                counted += 1;
            }
        }
        assert!(counted > 0, "cross entropy needs at least one target");
        let out = Tensor::from_rows(1, 1, vec![acc / F::from_f64(counted as f64)]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                counted,
            },
        )
    }

    fn grad_mut(&mut self, id: NodeId) -> &mut Tensor<F> {
        let (rows, cols) = {
            let v = &self.nodes[id.0].value;
            (v.rows, v.cols)
        };
        self.nodes[id.0]
            .grad
            .get_or_insert_with(|| Tensor::zeros(rows, cols))
    }

    /// Reverse pass from a scalar loss node. Clears previous gradients.
    pub fn backward(&mut self, loss: NodeId) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        assert_eq!(self.nodes[loss.0].value.data.len(), 1, "loss is scalar");
        self.grad_mut(loss).data[0] = F::ONE;

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = self.nodes[i].grad.clone() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    {
                        // dA += dC * B^T
                        let ga = self.grad_mut(a);
                        for r in 0..av.rows {
                            for c in 0..av.cols {
                                let mut acc = F::ZERO;
                                for j in 0..bv.cols {
                                    acc += grad.data[r * bv.cols + j] * bv.data[c * bv.cols + j];
                                }
                                ga.data[r * av.cols + c] += acc;
                            }
                        }
                    }
                    // dB += A^T * dC
                    let gb = self.grad_mut(b);
                    for j in 0..av.rows {
                        for r in 0..bv.rows {
                            let ajr = av.data[j * av.cols + r];
                            let grow = &grad.data[j * bv.cols..(j + 1) * bv.cols];
                            let gbrow = &mut gb.data[r * bv.cols..(r + 1) * bv.cols];
                            for (o, &d) in gbrow.iter_mut().zip(grow) {
                                *o += ajr * d;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (g, &d) in self.grad_mut(a).data.iter_mut().zip(&grad.data) {
                        *g += d;
                    }
                    for (g, &d) in self.grad_mut(b).data.iter_mut().zip(&grad.data) {
                        *g += d;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for ((g, &d), &y) in self
                        .grad_mut(a)
                        .data
                        .iter_mut()
                        .zip(&grad.data)
                        .zip(&bv.data)
                    {
                        *g += d * y;
                    }
                    for ((g, &d), &x) in self
                        .grad_mut(b)
                        .data
                        .iter_mut()
                        .zip(&grad.data)
                        .zip(&av.data)
                    {
                        *g += d * x;
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    for (g, &d) in self.grad_mut(a).data.iter_mut().zip(&grad.data) {
                        *g += d * c;
                    }
                }
                Op::Silu { a } => {
                    let a = *a;
                    let av = self.nodes[a.0].value.clone();
                    for ((g, &d), &x) in self
                        .grad_mut(a)
                        .data
                        .iter_mut()
                        .zip(&grad.data)
                        .zip(&av.data)
                    {
                        let sig = F::ONE / (F::ONE + (-x).exp());
                        *g += d * sig * (F::ONE + x * (F::ONE - sig));
                    }
                }
                Op::RmsNorm { x, w, inv_rms } => {
                    let (x, w) = (*x, *w);
                    let inv_rms = inv_rms.clone();
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    let d = xv.cols;
                    let inv_d = F::ONE / F::from_f64(d as f64);
                    {
                        let gw = self.grad_mut(w);
                        for r in 0..xv.rows {
                            let inv = inv_rms[r];
                            for c in 0..d {
                                gw.data[c] += grad.data[r * d + c] * xv.data[r * d + c] * inv;
                            }
                        }
                    }
                    let gx = self.grad_mut(x);
                    for r in 0..xv.rows {
                        let inv = inv_rms[r];
                        let mut t = F::ZERO;
                        for c in 0..d {
                            t += grad.data[r * d + c] * wv.data[c] * xv.data[r * d + c];
                        }
                        let k = inv * inv * inv * inv_d * t;
                        for c in 0..d {
                            gx.data[r * d + c] +=
                                grad.data[r * d + c] * wv.data[c] * inv - xv.data[r * d + c] * k;
                        }
                    }
                }
                Op::AttnScores { q, k, batch, heads } => {
                    let (q, k, batch, heads) = (*q, *k, *batch, *heads);
                    let qv = self.nodes[q.0].value.clone();
                    let kv = self.nodes[k.0].value.clone();
                    let dim = qv.cols;
                    let hd = dim / heads;
                    let seq = qv.rows / batch;
                    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
                    {
                        let gq = self.grad_mut(q);
                        for b in 0..batch {
                            for h in 0..heads {
                                for tq in 0..seq {
                                    let srow = (b * heads + h) * seq + tq;
                                    let qoff = (b * seq + tq) * dim + h * hd;
                                    for tk in 0..seq {
                                        let d = grad.data[srow * seq + tk] * scale;
                                        let krow = &kv.row(b * seq + tk)[h * hd..(h + 1) * hd];
                                        for (j, &y) in krow.iter().enumerate() {
                                            gq.data[qoff + j] += d * y;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let gk = self.grad_mut(k);
                    for b in 0..batch {
                        for h in 0..heads {
                            for tq in 0..seq {
                                let srow = (b * heads + h) * seq + tq;
                                let qrow = &qv.row(b * seq + tq)[h * hd..(h + 1) * hd];
                                for tk in 0..seq {
                                    let d = grad.data[srow * seq + tk] * scale;
                                    let koff = (b * seq + tk) * dim + h * hd;
                                    for (j, &x) in qrow.iter().enumerate() {
                                        gk.data[koff + j] += d * x;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::CausalSoftmax { a, seq } => {
                    let (a, seq) = (*a, *seq);
                    let yv = self.nodes[i].value.clone();
                    let ga = self.grad_mut(a);
                    for r in 0..yv.rows {
                        let allowed = (r % seq) + 1;
                        let mut dot = F::ZERO;
                        for c in 0..allowed {
                            dot += grad.data[r * seq + c] * yv.data[r * seq + c];
                        }
                        for c in 0..allowed {
                            let y = yv.data[r * seq + c];
                            ga.data[r * seq + c] += y * (grad.data[r * seq + c] - dot);
                        }
                    }
                }
                Op::AttnContext { p, v, batch, heads } => {
                    let (p, v, batch, heads) = (*p, *v, *batch, *heads);
                    let pv = self.nodes[p.0].value.clone();
                    let vv = self.nodes[v.0].value.clone();
                    let dim = vv.cols;
                    let hd = dim / heads;
                    let seq = vv.rows / batch;
                    {
                        let gp = self.grad_mut(p);
                        for b in 0..batch {
                            for h in 0..heads {
                                for tq in 0..seq {
                                    let prow = (b * heads + h) * seq + tq;
                                    let goff = (b * seq + tq) * dim + h * hd;
                                    for tk in 0..=tq {
                                        let vrow = &vv.row(b * seq + tk)[h * hd..(h + 1) * hd];
                                        let mut acc = F::ZERO;
                                        for (j, &x) in vrow.iter().enumerate() {
                                            acc += grad.data[goff + j] * x;
                                        }
                                        gp.data[prow * seq + tk] += acc;
                                    }
                                }
                            }
                        }
                    }
                    let gv = self.grad_mut(v);
                    for b in 0..batch {
                        for h in 0..heads {
                            for tq in 0..seq {
                                let prow = (b * heads + h) * seq + tq;
                                let goff = (b * seq + tq) * dim + h * hd;
                                for tk in 0..=tq {
                                    let w = pv.data[prow * seq + tk];
                                    let voff = (b * seq + tk) * dim + h * hd;
                                    for j in 0..hd {
                                        gv.data[voff + j] += w * grad.data[goff + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GatherWeight {
                    codebook,
                    codes,
                    d_in,
                    d_out,
                    deficiency,
                } => {
                    let codebook = *codebook;
                    let codes = codes.clone();
                    let (d_in, d_out, deficiency) = (*d_in, *d_out, *deficiency);
                    let g = self.nodes[codebook.0].value.cols;
                    let groups_per_row = (d_out + deficiency) / g;
                    let gc = self.grad_mut(codebook);
                    for r in 0..d_in {
                        let mut written = 0usize;
                        for gi in 0..groups_per_row {
                            let code = codes[r * groups_per_row + gi] as usize;
                            let take = g.min(d_out - written);
                            for j in 0..take {
                                gc.data[code * g + j] += grad.data[r * d_out + written + j];
                            }
                            written += take;
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let d = self.nodes[table.0].value.cols;
                    let gt = self.grad_mut(table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt.data[id as usize * d + j] += grad.data[r * d + j];
                        }
                    }
                }
                Op::MeanSquaredError { pred, target } => {
                    let pred = *pred;
                    let target = target.clone();
                    let pv = self.nodes[pred.0].value.clone();
                    let n = F::from_f64(pv.data.len() as f64);
                    let two = F::from_f32(2.0);
                    let d0 = grad.data[0];
                    let gp = self.grad_mut(pred);
                    for ((g, &p), &t) in gp.data.iter_mut().zip(&pv.data).zip(&target.data) {
                        *g += d0 * two * (p - t) / n;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    counted,
                } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let probs = probs.clone();
                    let counted = *counted;
                    let v = probs.cols;
                    let inv = F::ONE / F::from_f64(counted as f64);
                    let d0 = grad.data[0];
                    let gl = self.grad_mut(logits);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_TARGET {
                            continue;
                        }
                        for c in 0..v {
                            let indicator = if c == t as usize { F::ONE } else { F::ZERO };
                            gl.data[r * v + c] += d0 * (probs.data[r * v + c] - indicator) * inv;
                        }
                    }
                }
            }
        }
    }
}

fn matmul_into<F: Real>(a: &Tensor<F>, b: &Tensor<F>, out: &mut Tensor<F>) {
    // i-k-j order keeps the inner loop contiguous in b and out.
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::det_rng;
    use rand::Rng;

    fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_rows(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    /// Central finite differences on every element of every probe leaf.
    fn check_grads(
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
        leaves: Vec<Tensor<f64>>,
        h: f64,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss);
        let grads: Vec<Tensor<f64>> = ids.iter().map(|&id| tape.grad(id)).collect();

        let eval = |perturbed: &[Tensor<f64>]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
            let loss = build(&mut t, &ids);
            t.value(loss).data[0]
        };

        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.data.len() {
                let mut plus = leaves.clone();
                plus[li].data[e] += h;
                let mut minus = leaves.clone();
                minus[li].data[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads[li].data[e];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "leaf {li} elem {e}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn matmul_mse_gradients() {
        let mut rng = det_rng(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let target = rand_tensor(&mut rng, 3, 2);
        check_grads(
            move |t, ids| {
                let y = t.matmul(ids[0], ids[1]);
                t.mse(y, target.clone())
            },
            vec![a, b],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn elementwise_chain_gradients() {
        let mut rng = det_rng(2);
        let a = rand_tensor(&mut rng, 2, 5);
        let b = rand_tensor(&mut rng, 2, 5);
        let target = rand_tensor(&mut rng, 2, 5);
        check_grads(
            move |t, ids| {
                let s = t.silu(ids[0]);
                let m = t.mul(s, ids[1]);
                let sum = t.add(m, ids[0]);
                let scaled = t.scale(sum, 0.7);
                t.mse(scaled, target.clone())
            },
            vec![a, b],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn rms_norm_gradients() {
        let mut rng = det_rng(3);
        let x = rand_tensor(&mut rng, 4, 6);
        let w = rand_tensor(&mut rng, 1, 6);
        let target = rand_tensor(&mut rng, 4, 6);
        check_grads(
            move |t, ids| {
                let y = t.rms_norm(ids[0], ids[1], 1e-5);
                t.mse(y, target.clone())
            },
            vec![x, w],
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn attention_chain_gradients() {
        let mut rng = det_rng(4);
        let (batch, seq, dim, heads) = (2, 3, 4, 2);
        let q = rand_tensor(&mut rng, batch * seq, dim);
        let k = rand_tensor(&mut rng, batch * seq, dim);
        let v = rand_tensor(&mut rng, batch * seq, dim);
        let target = rand_tensor(&mut rng, batch * seq, dim);
        check_grads(
            move |t, ids| {
                let s = t.attn_scores(ids[0], ids[1], batch, heads);
                let p = t.causal_softmax(s, seq);
                let c = t.attn_context(p, ids[2], batch, heads);
                t.mse(c, target.clone())
            },
            vec![q, k, v],
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn causal_mask_zeroes_the_future() {
        let mut tape: Tape<f64> = Tape::new();
        let scores = tape.leaf(Tensor::from_rows(2, 2, vec![5.0, 100.0, 1.0, 1.0]));
        let p = tape.causal_softmax(scores, 2);
        let pv = tape.value(p);
        assert_eq!(pv.data[0], 1.0); // row 0 sees only key 0
        assert_eq!(pv.data[1], 0.0);
        assert!((pv.data[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gather_weight_gradients_accumulate_per_centroid() {
        let mut rng = det_rng(5);
        let codebook = rand_tensor(&mut rng, 3, 2);
        // d_out 3 with g 2 -> deficiency 1, two groups per input row.
        let codes = Arc::new(vec![0u16, 1, 1, 2]);
        let x = rand_tensor(&mut rng, 2, 2);
        let target = rand_tensor(&mut rng, 2, 3);
        let codes2 = codes.clone();
        check_grads(
            move |t, ids| {
                let w = t.gather_weight(ids[1], codes2.clone(), 2, 3, 1);
                let y = t.matmul(ids[0], w);
                t.mse(y, target.clone())
            },
            vec![x, codebook],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn unused_centroids_and_pad_slots_get_zero_gradient() {
        let mut rng = det_rng(8);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, 2, 2));
        let cb = tape.leaf(rand_tensor(&mut rng, 4, 2));
        // Centroid 1 appears only as each row's tail group (its second
        // component sits in the sliced-off pad column).
        let codes = Arc::new(vec![0u16, 1, 0, 1]);
        let w = tape.gather_weight(cb, codes, 2, 3, 1);
        let y = tape.matmul(x, w);
        let loss = tape.mse(y, Tensor::zeros(2, 3));
        tape.backward(loss);
        let gc = tape.grad(cb);
        assert!(gc.row(2).iter().all(|&v| v == 0.0));
        assert!(gc.row(3).iter().all(|&v| v == 0.0));
        assert_eq!(gc.row(1)[1], 0.0);
        assert!(gc.row(1)[0] != 0.0);
    }

    #[test]
    fn embedding_and_cross_entropy_gradients() {
        let mut rng = det_rng(6);
        let table = rand_tensor(&mut rng, 5, 3);
        let proj = rand_tensor(&mut rng, 3, 5);
        let ids = Arc::new(vec![0u16, 3, 3, 1]);
        let targets = Arc::new(vec![3u16, 3, IGNORE_TARGET, 0]);
        check_grads(
            move |t, nodes| {
                let e = t.embed(nodes[0], ids.clone());
                let logits = t.matmul(e, nodes[1]);
                t.cross_entropy(logits, targets.clone())
            },
            vec![table, proj],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::zeros(4, 7));
        let loss = tape.cross_entropy(logits, Arc::new(vec![1, 2, 3, 4]));
        assert!((tape.value(loss).data[0] - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn f32_and_f64_forwards_agree() {
        let mut rng = det_rng(7);
        let vals: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut t32: Tape<f32> = Tape::new();
        let a32 = t32.leaf(Tensor::from_f32_slice(4, 6, &vals));
        let w32 = t32.leaf(Tensor::from_f32_slice(1, 6, &[1.0; 6]));
        let y32 = t32.rms_norm(a32, w32, 1e-5);
        let s32 = t32.silu(y32);

        let mut t64: Tape<f64> = Tape::new();
        let a64 = t64.leaf(Tensor::from_f32_slice(4, 6, &vals));
        let w64 = t64.leaf(Tensor::from_f32_slice(1, 6, &[1.0; 6]));
        let y64 = t64.rms_norm(a64, w64, 1e-5);
        let s64 = t64.silu(y64);

        for (a, b) in t32.value(s32).data.iter().zip(&t64.value(s64).data) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}
