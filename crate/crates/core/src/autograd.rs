//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters are borrowed from a [`ParamStore`]; calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a parameter or a differentiable input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{gemm, ParamId, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape metadata for the fused multi-head attention kernel.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Number of valid (non-pad) keys per batch element.
    pub key_lens: Vec<usize>,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
}

/// A contiguous run of rows `[start, start + len)` treated as one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    SumRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    DiagEmbed(Var),
    Inverse(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
    SegmentMax(Var, Vec<usize>),
    SegmentMean(Var, Vec<Segment>),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to any node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient with respect to a parameter, if the parameter was used.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, n)| self.nodes[n].as_ref())
    }

    /// Iterate over `(param, gradient)` for every parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|&(p, n)| self.nodes[n].as_ref().map(|g| (p, g)))
    }

    /// Move parameter gradients out, indexed by `ParamId`.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; n_params];
        for &(p, n) in &self.params {
            out[p.0] = self.nodes[n].take();
        }
        out
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    record: bool,
    train: bool,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// A recording graph; dropout is active only when `train` is set.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
            record: true,
            train: false,
            rng: None,
        }
    }

    /// Training graph with dropout driven by `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(params);
        g.train = true;
        g.rng = Some(rng);
        g
    }

    /// Non-recording graph: values only, no backward possible.
    pub fn inference(params: &'p ParamStore) -> Self {
        let mut g = Self::new(params);
        g.record = false;
        g
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.params.get(*p),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = if self.record && requires_grad { (op, true) } else { (Op::Leaf, false) };
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Insert a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad: self.record });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (used for gradients w.r.t. inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = self.record;
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul: {:?} x {:?}", av.shape(), bv.shape());
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, 1.0, av.data(), k, 1, bv.data(), n, 1, 0.0, out.data_mut(), n, 1);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_t: {:?} x {:?}ᵀ", av.shape(), bv.shape());
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, 1.0, av.data(), k, 1, bv.data(), 1, k, 0.0, out.data_mut(), n, 1);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Turn a `1×d` row into a `d×d` diagonal matrix.
    pub fn diag_embed(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "diag_embed expects a row vector");
        let d = av.cols();
        let mut out = Tensor::zeros(d, d);
        for i in 0..d {
            out.set(i, i, av.data()[i]);
        }
        let rg = self.rg(a);
        self.push(out, Op::DiagEmbed(a), rg)
    }

    /// Matrix inverse via Gauss-Jordan elimination with partial pivoting.
    /// Returns `None` when the matrix is numerically singular.
    pub fn inverse(&mut self, a: Var) -> Option<Var> {
        let out = invert(self.value(a))?;
        let rg = self.rg(a);
        Some(self.push(out, Op::Inverse(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Add a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols()), rv.shape(), "add_row shape mismatch");
        let mut out = av.clone();
        let c = av.cols();
        for r in 0..av.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data()[..c]) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiply every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols()), rv.shape(), "mul_row shape mismatch");
        let mut out = av.clone();
        for r in 0..av.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// Inverted dropout; identity outside training graphs or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).data().len();
        let rng = self.rng.as_mut().expect("training graph carries an rng");
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(a);
        self.push(out, Op::Dropout(a, mask), rg)
    }

    // ---- reductions -----------------------------------------------------

    /// Row sums as an `r×1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::from_vec(1, 1, vec![self.value(a).sum()]);
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Elementwise maximum over each segment of rows; one output row per segment.
    pub fn segment_max(&mut self, a: Var, segments: &[Segment]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Tensor::zeros(segments.len(), c);
        let mut arg = vec![0usize; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            assert!(seg.len > 0, "segment_max over an empty segment");
            for j in 0..c {
                let mut best = seg.start;
                for r in seg.start + 1..seg.start + seg.len {
                    if av.get(r, j) > av.get(best, j) {
                        best = r;
                    }
                }
                arg[s * c + j] = best;
                out.set(s, j, av.get(best, j));
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SegmentMax(a, arg), rg)
    }

    /// Elementwise mean over each segment of rows.
    pub fn segment_mean(&mut self, a: Var, segments: &[Segment]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Tensor::zeros(segments.len(), c);
        for (s, seg) in segments.iter().enumerate() {
            assert!(seg.len > 0, "segment_mean over an empty segment");
            let inv = 1.0 / seg.len as f64;
            for r in seg.start..seg.start + seg.len {
                for (o, x) in out.row_mut(s).iter_mut().zip(av.row(r)) {
                    *o += x * inv;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SegmentMean(a, segments.to_vec()), rg)
    }

    // ---- shape ----------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    /// Select rows by index (repeats allowed); the embedding lookup primitive.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Tensor::zeros(idx.len(), c);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), rg)
    }

    // ---- fused kernels --------------------------------------------------

    /// Row-wise layer normalisation with learned `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.set(i, j, h);
                out.set(i, j, h * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Scaled dot-product attention over `heads` column groups.
    ///
    /// `q` is `(batch·q_len)×d`, `k` and `v` are `(batch·k_len)×d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttnLayout { batch, q_len, k_len, heads, .. } = layout;
        assert_eq!(qv.rows(), batch * q_len, "attention: query rows");
        assert_eq!(kv.shape(), (batch * k_len, d), "attention: key shape");
        assert_eq!(vv.shape(), (batch * k_len, d), "attention: value shape");
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        assert_eq!(layout.key_lens.len(), batch);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = Tensor::zeros(batch * q_len, d);
        for b in 0..batch {
            let klen = layout.key_lens[b].min(k_len);
            for h in 0..heads {
                let qo = b * q_len * d + h * dh;
                let ko = b * k_len * d + h * dh;
                let po = (b * heads + h) * q_len * k_len;
                let p = &mut probs[po..po + q_len * k_len];
                gemm(q_len, dh, k_len, scale, &qv.data()[qo..], d, 1, &kv.data()[ko..], 1, d, 0.0, p, k_len, 1);
                for i in 0..q_len {
                    let limit = if layout.causal { klen.min(i + 1) } else { klen };
                    let row = &mut p[i * k_len..(i + 1) * k_len];
                    softmax_prefix(row, limit);
                }
                gemm(q_len, k_len, dh, 1.0, p, k_len, 1, &vv.data()[ko..], d, 1, 0.0, &mut out.data_mut()[qo..], d, 1);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let probs = if self.record && rg { probs } else { Vec::new() };
        self.push(out, Op::Attention { q, k, v, layout, probs }, rg)
    }

    /// Mean token-level cross-entropy of `logits` against `targets`;
    /// `None` targets are ignored. Returns a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        let mut probs = Tensor::zeros(n, c);
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            let Some(t) = targets[i] else { continue };
            assert!(t < c, "cross_entropy: target {t} out of range {c}");
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[t];
            count += 1;
            for (p, x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar");
        self.backward_with(loss, Tensor::filled(1, 1, 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert!(self.record, "backward on an inference graph");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self.param_nodes.iter().enumerate().filter_map(|(p, v)| v.map(|v| (ParamId(p), v.0))).collect();
        Gradients { nodes: grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.nodes[v.0].requires_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc_with(grads, *a, || {
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, 1.0, g.data(), n, 1, bv.data(), 1, n, 0.0, da.data_mut(), k, 1);
                    da
                });
                self.acc_with(grads, *b, || {
                    let mut db = Tensor::zeros(k, n);
                    gemm(k, m, n, 1.0, av.data(), 1, k, g.data(), n, 1, 0.0, db.data_mut(), n, 1);
                    db
                });
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                self.acc_with(grads, *a, || {
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, 1.0, g.data(), n, 1, bv.data(), k, 1, 0.0, da.data_mut(), k, 1);
                    da
                });
                self.acc_with(grads, *b, || {
                    let mut db = Tensor::zeros(n, k);
                    gemm(n, m, k, 1.0, g.data(), 1, n, av.data(), k, 1, 0.0, db.data_mut(), k, 1);
                    db
                });
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || hadamard(g, bv));
                self.acc_with(grads, *b, || hadamard(g, av));
            }
            Op::AddRow(a, row) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *row, || col_sums(g));
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                self.acc_with(grads, *a, || {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (x, s) in da.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    da
                });
                self.acc_with(grads, *row, || col_sums(&hadamard(g, av)));
            }
            Op::Scale(a, s) => self.acc_with(grads, *a, || g.map(|x| x * s)),
            Op::Tanh(a) => self.acc_with(grads, *a, || zip_map(g, out, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => self.acc_with(grads, *a, || zip_map(g, out, |g, y| g * y * (1.0 - y))),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, || zip_map(g, av, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Exp(a) => self.acc_with(grads, *a, || hadamard(g, out)),
            Op::Square(a) => {
                let av = self.value(*a);
                self.acc_with(grads, *a, || zip_map(g, av, |g, x| 2.0 * g * x));
            }
            Op::Dropout(a, mask) => self.acc_with(grads, *a, || {
                let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                Tensor::from_vec(g.rows(), g.cols(), data)
            }),
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc_with(grads, *a, || {
                    let mut da = Tensor::zeros(r, c);
                    for i in 0..r {
                        da.row_mut(i).fill(g.data()[i]);
                    }
                    da
                });
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc_with(grads, *a, || Tensor::filled(r, c, g.data()[0]));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc_with(grads, p, || {
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        dp
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                self.acc_with(grads, *a, || {
                    let mut da = Tensor::zeros(r, c);
                    let w = g.cols();
                    for i in 0..r {
                        da.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                    }
                    da
                });
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).shape();
                self.acc_with(grads, *a, || {
                    let mut da = Tensor::zeros(r, c);
                    for (i, &src) in idx.iter().enumerate() {
                        for (d, x) in da.row_mut(src).iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    da
                });
            }
            Op::Transpose(a) => self.acc_with(grads, *a, || g.transpose()),
            Op::DiagEmbed(a) => self.acc_with(grads, *a, || {
                let d = g.rows();
                Tensor::row_vector((0..d).map(|i| g.get(i, i)).collect())
            }),
            Op::Inverse(a) => self.acc_with(grads, *a, || {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹  ⇒  ∂L/∂A = -A⁻ᵀ G A⁻ᵀ
                let bt = out.transpose();
                bt.matmul(g).matmul(&bt).map(|x| -x)
            }),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, c) = xhat.shape();
                let gv = self.value(*gamma);
                self.acc_with(grads, *gamma, || col_sums(&hadamard(g, xhat)));
                self.acc_with(grads, *beta, || col_sums(g));
                self.acc_with(grads, *x, || {
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let dh = g.get(i, j) * gv.data()[j];
                            mean_d += dh;
                            mean_dx += dh * xhat.get(i, j);
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let dh = g.get(i, j) * gv.data()[j];
                            dx.set(i, j, rstd[i] * (dh - mean_d - xhat.get(i, j) * mean_dx));
                        }
                    }
                    dx
                });
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, layout, probs, g, grads);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let scale = if *count > 0 { g.data()[0] / *count as f64 } else { 0.0 };
                self.acc_with(grads, *logits, || {
                    let mut dl = Tensor::zeros(probs.rows(), probs.cols());
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for (d, p) in dl.row_mut(i).iter_mut().zip(probs.row(i)) {
                            *d = p * scale;
                        }
                        let cur = dl.get(i, t);
                        dl.set(i, t, cur - scale);
                    }
                    dl
                });
            }
            Op::SegmentMax(a, arg) => {
                let (r, c) = self.value(*a).shape();
                self.acc_with(grads, *a, || {
                    let mut da = Tensor::zeros(r, c);
                    for s in 0..g.rows() {
                        for j in 0..c {
                            let src = arg[s * c + j];
                            let cur = da.get(src, j);
                            da.set(src, j, cur + g.get(s, j));
                        }
                    }
                    da
                });
            }
            Op::SegmentMean(a, segments) => {
                let (r, c) = self.value(*a).shape();
                self.acc_with(grads, *a, || {
                    let mut da = Tensor::zeros(r, c);
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len as f64;
                        for row in seg.start..seg.start + seg.len {
                            for (d, x) in da.row_mut(row).iter_mut().zip(g.row(s)) {
                                *d += x * inv;
                            }
                        }
                    }
                    da
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttnLayout { batch, q_len, k_len, heads, .. } = *layout;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(qv.rows(), d);
        let mut dk = Tensor::zeros(kv.rows(), d);
        let mut dv = Tensor::zeros(vv.rows(), d);
        let mut dp = vec![0.0; q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                let qo = b * q_len * d + h * dh;
                let ko = b * k_len * d + h * dh;
                let po = (b * heads + h) * q_len * k_len;
                let p = &probs[po..po + q_len * k_len];
                // dV = Pᵀ dO
                gemm(k_len, q_len, dh, 1.0, p, 1, k_len, &g.data()[qo..], d, 1, 1.0, &mut dv.data_mut()[ko..], d, 1);
                // dP = dO Vᵀ
                gemm(q_len, dh, k_len, 1.0, &g.data()[qo..], d, 1, &vv.data()[ko..], 1, d, 0.0, &mut dp, k_len, 1);
                for i in 0..q_len {
                    let prow = &p[i * k_len..(i + 1) * k_len];
                    let drow = &mut dp[i * k_len..(i + 1) * k_len];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dx, px) in drow.iter_mut().zip(prow) {
                        *dx = px * (*dx - dot);
                    }
                }
                // dQ = scale · dS K ; dK = scale · dSᵀ Q
                gemm(
                    q_len,
                    k_len,
                    dh,
                    scale,
                    &dp,
                    k_len,
                    1,
                    &kv.data()[ko..],
                    d,
                    1,
                    1.0,
                    &mut dq.data_mut()[qo..],
                    d,
                    1,
                );
                gemm(
                    k_len,
                    q_len,
                    dh,
                    scale,
                    &dp,
                    1,
                    k_len,
                    &qv.data()[qo..],
                    d,
                    1,
                    1.0,
                    &mut dk.data_mut()[ko..],
                    d,
                    1,
                );
            }
        }
        self.acc(grads, q, dq);
        self.acc(grads, k, dk);
        self.acc(grads, v, dv);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over `row[..limit]`, zeros after.
fn softmax_prefix(row: &mut [f64], limit: usize) {
    if limit == 0 {
        row.fill(0.0);
        return;
    }
    let m = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in &mut row[..limit] {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in &mut row[..limit] {
        *x /= z;
    }
    row[limit..].fill(0.0);
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Tensor) -> Option<Tensor> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "invert expects a square matrix");
    let mut m = a.clone();
    let mut inv = Tensor::identity(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))?;
        let pv = m.get(pivot, col);
        if !pv.is_finite() || pv.abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                let (x, y) = (m.get(col, j), m.get(pivot, j));
                m.set(col, j, y);
                m.set(pivot, j, x);
                let (x, y) = (inv.get(col, j), inv.get(pivot, j));
                inv.set(col, j, y);
                inv.set(pivot, j, x);
            }
        }
        let ip = 1.0 / m.get(col, col);
        for j in 0..n {
            m.set(col, j, m.get(col, j) * ip);
            inv.set(col, j, inv.get(col, j) * ip);
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m.get(i, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m.set(i, j, m.get(i, j) - f * m.get(col, j));
                inv.set(i, j, inv.get(i, j) - f * inv.get(col, j));
            }
        }
    }
    inv.all_finite().then_some(inv)
}
