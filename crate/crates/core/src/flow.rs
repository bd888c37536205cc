//! Invertible flow layers, per-language flow stacks and exact densities.
//!
//! Layers are parameterised in the generative direction (base → data).
//! [`FlowStack::forward`] maps data to the base space by applying layer
//! inverses in reverse order and accumulates the log-determinant of that
//! data → base Jacobian, so `log p(z) = log N(ε) + log_det`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// A single sentence-level latent vector (or a base-space sample).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("latent vector has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn to_row(&self) -> Tensor {
        Tensor::row_vector(self.0.clone())
    }

    pub fn max_abs_diff(&self, other: &LatentVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    /// Affine coupling layers only.
    RealNvp,
    /// Actnorm, LU-factored invertible linear map, then affine coupling.
    Glow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub kind: FlowKind,
    pub layers: usize,
    pub hidden: usize,
    /// Bound on the coupling log-scale: `s = s_max · tanh(raw)`.
    pub s_max: f64,
    /// Dropout on the coupling trunk activations in training graphs.
    pub dropout: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { kind: FlowKind::RealNvp, layers: 3, hidden: 64, s_max: 2.0, dropout: 0.0 }
    }
}

impl FlowConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!("latent dimension must be even and positive, got {dim}")));
        }
        if self.layers == 0 {
            return Err(Error::Config("a flow stack needs at least one layer".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("coupling hidden width must be positive".into()));
        }
        if !(self.s_max > 0.0) {
            return Err(Error::Config("s_max must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("flow dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Standard normal base distribution over `dim` dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseDistribution {
    pub dim: usize,
}

impl BaseDistribution {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn log_density(&self, eps: &[f64]) -> f64 {
        debug_assert_eq!(eps.len(), self.dim);
        -0.5 * self.dim as f64 * (2.0 * PI).ln() - 0.5 * eps.iter().map(|x| x * x).sum::<f64>()
    }

    /// Per-row log density as a `B×1` node.
    pub fn log_density_graph(&self, g: &mut Graph, eps: Var) -> Var {
        let sq = g.square(eps);
        let ss = g.sum_rows(sq);
        let half = g.scale(ss, -0.5);
        let (b, _) = g.shape(half);
        let c = g.constant(Tensor::filled(b, 1, -0.5 * self.dim as f64 * (2.0 * PI).ln()));
        g.add(half, c)
    }
}

/// Which contiguous half of the vector passes through a coupling unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    First,
    Second,
}

/// realNVP affine coupling: `y_b = z_b ⊙ exp(s(z_a)) + t(z_a)`, `y_a = z_a`.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    dim: usize,
    passthrough: Half,
    s_max: f64,
    dropout: f64,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ws: ParamId,
    bs: ParamId,
    wt: ParamId,
    bt: ParamId,
}

impl CouplingLayer {
    /// Trunk weights are Glorot-initialised; both heads start at zero so
    /// the layer is the identity map.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        s_max: f64,
        passthrough: Half,
        rng: &mut R,
    ) -> Self {
        let h = dim / 2;
        Self {
            dim,
            passthrough,
            s_max,
            dropout: 0.0,
            w1: store.add(format!("{prefix}.w1"), Tensor::glorot(h, hidden, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, hidden)),
            w2: store.add(format!("{prefix}.w2"), Tensor::glorot(hidden, hidden, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, hidden)),
            ws: store.add(format!("{prefix}.scale_w"), Tensor::zeros(hidden, h)),
            bs: store.add(format!("{prefix}.scale_b"), Tensor::zeros(1, h)),
            wt: store.add(format!("{prefix}.shift_w"), Tensor::zeros(hidden, h)),
            bt: store.add(format!("{prefix}.shift_b"), Tensor::zeros(1, h)),
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn passthrough(&self) -> Half {
        self.passthrough
    }

    /// Head parameters `(scale_w, scale_b, shift_w, shift_b)`.
    pub fn head_params(&self) -> (ParamId, ParamId, ParamId, ParamId) {
        (self.ws, self.bs, self.wt, self.bt)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2, self.ws, self.bs, self.wt, self.bt]
    }

    fn check(&self, g: &Graph, x: Var) -> Result<()> {
        let (_, c) = g.shape(x);
        if c != self.dim {
            return Err(Error::Config(format!("coupling expects dimension {}, got {c}", self.dim)));
        }
        Ok(())
    }

    fn split(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let h = self.dim / 2;
        let (first, second) = (g.slice_cols(x, 0, h), g.slice_cols(x, h, h));
        match self.passthrough {
            Half::First => (first, second),
            Half::Second => (second, first),
        }
    }

    fn join(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        match self.passthrough {
            Half::First => g.concat_cols(&[a, b]),
            Half::Second => g.concat_cols(&[b, a]),
        }
    }

    /// Log-scale `s` and shift `t` conditioned on the passthrough half.
    fn nets(&self, g: &mut Graph, xa: Var) -> (Var, Var) {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(xa, w1);
        let h = g.add_row(h, b1);
        let h = g.tanh(h);
        let h = g.dropout(h, self.dropout);
        let h = g.matmul(h, w2);
        let h = g.add_row(h, b2);
        let h = g.tanh(h);
        let h = g.dropout(h, self.dropout);
        let (ws, bs, wt, bt) = (g.param(self.ws), g.param(self.bs), g.param(self.wt), g.param(self.bt));
        let raw = g.matmul(h, ws);
        let raw = g.add_row(raw, bs);
        let s = g.tanh(raw);
        let s = g.scale(s, self.s_max);
        let t = g.matmul(h, wt);
        let t = g.add_row(t, bt);
        (s, t)
    }

    /// Generative direction. Returns the output and a `B×1` log-det column.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        self.check(g, z)?;
        let (za, zb) = self.split(g, z);
        let (s, t) = self.nets(g, za);
        let es = g.exp(s);
        let yb = g.mul(zb, es);
        let yb = g.add(yb, t);
        let y = self.join(g, za, yb);
        let ld = g.sum_rows(s);
        Ok((y, ld))
    }

    /// Exact algebraic inverse of [`CouplingLayer::forward`].
    pub fn inverse(&self, g: &mut Graph, y: Var) -> Result<(Var, Var)> {
        self.check(g, y)?;
        let (ya, yb) = self.split(g, y);
        let (s, t) = self.nets(g, ya);
        let ns = g.neg(s);
        let ens = g.exp(ns);
        let diff = g.sub(yb, t);
        let zb = g.mul(diff, ens);
        let z = self.join(g, ya, zb);
        let ld = g.sum_rows(ns);
        Ok((z, ld))
    }
}

/// Per-dimension affine normalisation `y = x ⊙ exp(log_scale) + bias`.
#[derive(Clone, Debug)]
pub struct ActNorm {
    log_scale: ParamId,
    bias: ParamId,
}

impl ActNorm {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            log_scale: store.add(format!("{prefix}.log_scale"), Tensor::zeros(1, dim)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn param_ids(&self) -> (ParamId, ParamId) {
        (self.log_scale, self.bias)
    }

    /// Set the scale (must be positive) and bias directly.
    pub fn set(&self, store: &mut ParamStore, scale: &[f64], bias: &[f64]) {
        let ls = store.get_mut(self.log_scale);
        for (d, s) in ls.data_mut().iter_mut().zip(scale) {
            assert!(*s > 0.0, "actnorm scale must be positive");
            *d = s.ln();
        }
        store.get_mut(self.bias).data_mut().copy_from_slice(bias);
    }

    fn log_det(&self, g: &mut Graph, rows: usize) -> Var {
        let ls = g.param(self.log_scale);
        let total = g.sum_all(ls);
        let ones = g.constant(Tensor::filled(rows, 1, 1.0));
        // broadcast the scalar log-det to every row
        g.matmul(ones, total)
    }

    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let (ls, b) = (g.param(self.log_scale), g.param(self.bias));
        let s = g.exp(ls);
        let y = g.mul_row(x, s);
        let y = g.add_row(y, b);
        let rows = g.shape(x).0;
        (y, self.log_det(g, rows))
    }

    fn inverse(&self, g: &mut Graph, y: Var) -> (Var, Var) {
        let (ls, b) = (g.param(self.log_scale), g.param(self.bias));
        let nb = g.neg(b);
        let centered = g.add_row(y, nb);
        let nls = g.neg(ls);
        let inv = g.exp(nls);
        let x = g.mul_row(centered, inv);
        let rows = g.shape(y).0;
        let ld = self.log_det(g, rows);
        (x, g.neg(ld))
    }
}

/// Invertible `d×d` linear map stored as `W = P · L · U`, applied as `y = x · W`.
///
/// `P` is a fixed permutation, `L` unit lower-triangular and `U` upper
/// triangular with diagonal `sign ⊙ exp(log_s)`, so `ln|det W| = Σ log_s`.
#[derive(Clone, Debug)]
pub struct InvertibleLinear {
    dim: usize,
    perm: Vec<usize>,
    sign: Vec<f64>,
    lower: ParamId,
    upper: ParamId,
    log_s: ParamId,
}

impl InvertibleLinear {
    /// Initialised from the LU factorisation of a random rotation.
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let q = random_orthogonal(dim, rng);
        let (perm, l, u) = lu_decompose(&q);
        let mut sign = vec![1.0; dim];
        let mut log_s = Tensor::zeros(1, dim);
        let mut upper = u.clone();
        for i in 0..dim {
            let d = u.get(i, i);
            sign[i] = d.signum();
            log_s.data_mut()[i] = d.abs().ln();
            upper.set(i, i, 0.0);
        }
        let mut lower = l;
        for i in 0..dim {
            lower.set(i, i, 0.0);
        }
        Self {
            dim,
            perm,
            sign,
            lower: store.add(format!("{prefix}.lower"), lower),
            upper: store.add(format!("{prefix}.upper"), upper),
            log_s: store.add(format!("{prefix}.log_s"), log_s),
        }
    }

    pub fn param_ids(&self) -> (ParamId, ParamId, ParamId) {
        (self.lower, self.upper, self.log_s)
    }

    /// Reset to the identity map.
    pub fn set_identity(&mut self, store: &mut ParamStore) {
        self.perm = (0..self.dim).collect();
        self.sign = vec![1.0; self.dim];
        *store.get_mut(self.lower) = Tensor::zeros(self.dim, self.dim);
        *store.get_mut(self.upper) = Tensor::zeros(self.dim, self.dim);
        *store.get_mut(self.log_s) = Tensor::zeros(1, self.dim);
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn signs(&self) -> &[f64] {
        &self.sign
    }

    pub(crate) fn restore_fixed(&mut self, perm: Vec<usize>, sign: Vec<f64>) {
        self.perm = perm;
        self.sign = sign;
    }

    fn weight(&self, g: &mut Graph) -> Var {
        let d = self.dim;
        let mut lmask = Tensor::zeros(d, d);
        let mut umask = Tensor::zeros(d, d);
        let mut p = Tensor::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                if j < i {
                    lmask.set(i, j, 1.0);
                } else if j > i {
                    umask.set(i, j, 1.0);
                }
            }
            p.set(i, self.perm[i], 1.0);
        }
        let (lp, up, ls) = (g.param(self.lower), g.param(self.upper), g.param(self.log_s));
        let lmask = g.constant(lmask);
        let umask = g.constant(umask);
        let eye = g.constant(Tensor::identity(d));
        let l = g.mul(lp, lmask);
        let l = g.add(l, eye);
        let u = g.mul(up, umask);
        let sign = g.constant(Tensor::row_vector(self.sign.clone()));
        let es = g.exp(ls);
        let diag = g.mul(es, sign);
        let diag = g.diag_embed(diag);
        let u = g.add(u, diag);
        let p = g.constant(p);
        let pl = g.matmul(p, l);
        g.matmul(pl, u)
    }

    fn log_det(&self, g: &mut Graph, rows: usize) -> Var {
        let ls = g.param(self.log_s);
        let total = g.sum_all(ls);
        let ones = g.constant(Tensor::filled(rows, 1, 1.0));
        g.matmul(ones, total)
    }

    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let w = self.weight(g);
        let y = g.matmul(x, w);
        let rows = g.shape(x).0;
        (y, self.log_det(g, rows))
    }

    fn inverse(&self, g: &mut Graph, y: Var) -> Result<(Var, Var)> {
        let w = self.weight(g);
        let winv = g.inverse(w).ok_or_else(|| Error::Numeric("invertible linear map is singular".into()))?;
        let x = g.matmul(y, winv);
        let rows = g.shape(y).0;
        let ld = self.log_det(g, rows);
        Ok((x, g.neg(ld)))
    }
}

/// Glow step for flat vectors: actnorm → invertible linear → affine coupling.
#[derive(Clone, Debug)]
pub struct GlowLayer {
    pub actnorm: ActNorm,
    pub linear: InvertibleLinear,
    pub coupling: CouplingLayer,
    actnorm_initialized: bool,
}

impl GlowLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        s_max: f64,
        passthrough: Half,
        rng: &mut R,
    ) -> Self {
        Self {
            actnorm: ActNorm::new(store, &format!("{prefix}.actnorm"), dim),
            linear: InvertibleLinear::new(store, &format!("{prefix}.linear"), dim, rng),
            coupling: CouplingLayer::new(store, &format!("{prefix}.coupling"), dim, hidden, s_max, passthrough, rng),
            actnorm_initialized: false,
        }
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.actnorm_initialized
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        self.coupling.check(g, z)?;
        let (h, ld1) = self.actnorm.forward(g, z);
        let (h, ld2) = self.linear.forward(g, h);
        let (y, ld3) = self.coupling.forward(g, h)?;
        let ld = g.add(ld1, ld2);
        Ok((y, g.add(ld, ld3)))
    }

    pub fn inverse(&self, g: &mut Graph, y: Var) -> Result<(Var, Var)> {
        self.coupling.check(g, y)?;
        let (h, ld3) = self.coupling.inverse(g, y)?;
        let (h, ld2) = self.linear.inverse(g, h)?;
        let (z, ld1) = self.actnorm.inverse(g, h);
        let ld = g.add(ld3, ld2);
        Ok((z, g.add(ld, ld1)))
    }
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    Coupling(CouplingLayer),
    Glow(GlowLayer),
}

impl FlowLayer {
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        match self {
            FlowLayer::Coupling(c) => c.forward(g, z),
            FlowLayer::Glow(l) => l.forward(g, z),
        }
    }

    pub fn inverse(&self, g: &mut Graph, y: Var) -> Result<(Var, Var)> {
        match self {
            FlowLayer::Coupling(c) => c.inverse(g, y),
            FlowLayer::Glow(l) => l.inverse(g, y),
        }
    }
}

/// An ordered stack of K invertible layers for one language.
#[derive(Clone, Debug)]
pub struct FlowStack {
    tag: String,
    dim: usize,
    layers: Vec<FlowLayer>,
}

impl FlowStack {
    /// Build a stack; the passthrough half alternates layer by layer.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        tag: &str,
        dim: usize,
        cfg: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        let layers = (0..cfg.layers)
            .map(|i| {
                let half = if i % 2 == 0 { Half::First } else { Half::Second };
                let prefix = format!("flow.{tag}.{i}");
                match cfg.kind {
                    FlowKind::RealNvp => FlowLayer::Coupling(
                        CouplingLayer::new(store, &prefix, dim, cfg.hidden, cfg.s_max, half, rng)
                            .with_dropout(cfg.dropout),
                    ),
                    FlowKind::Glow => {
                        let mut l = GlowLayer::new(store, &prefix, dim, cfg.hidden, cfg.s_max, half, rng);
                        l.coupling = l.coupling.with_dropout(cfg.dropout);
                        FlowLayer::Glow(l)
                    }
                }
            })
            .collect();
        Ok(Self { tag: tag.to_string(), dim, layers })
    }

    /// Assemble a stack from hand-built layers.
    pub fn from_layers(tag: &str, dim: usize, layers: Vec<FlowLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a flow stack needs at least one layer".into()));
        }
        Ok(Self { tag: tag.to_string(), dim, layers })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    fn check_dim(&self, g: &Graph, x: Var) -> Result<()> {
        let (_, c) = g.shape(x);
        if c != self.dim {
            return Err(Error::Config(format!("flow stack '{}' expects dimension {}, got {c}", self.tag, self.dim)));
        }
        Ok(())
    }

    fn finite(&self, g: &Graph, v: Var, layer: usize, dir: &str) -> Result<()> {
        if g.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in flow '{}' layer {layer} ({dir})", self.tag)))
        }
    }

    /// Data → base: `(ε, log|det ∂ε/∂z|)` with a `B×1` log-det column.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<(Var, Var)> {
        self.check_dim(g, z)?;
        let mut h = z;
        let mut total: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (next, ld) = layer.inverse(g, h)?;
            self.finite(g, next, i, "data to base")?;
            h = next;
            total = Some(match total {
                Some(t) => g.add(t, ld),
                None => ld,
            });
        }
        Ok((h, total.expect("non-empty stack")))
    }

    /// Base → data: `(z, log|det ∂z/∂ε|)`.
    pub fn inverse(&self, g: &mut Graph, eps: Var) -> Result<(Var, Var)> {
        self.check_dim(g, eps)?;
        let mut h = eps;
        let mut total: Option<Var> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward(g, h)?;
            self.finite(g, next, i, "base to data")?;
            h = next;
            total = Some(match total {
                Some(t) => g.add(t, ld),
                None => ld,
            });
        }
        Ok((h, total.expect("non-empty stack")))
    }

    /// Per-row `log p(z)` as a `B×1` node.
    pub fn log_prob(&self, g: &mut Graph, base: &BaseDistribution, z: Var) -> Result<Var> {
        if base.dim != self.dim {
            return Err(Error::Config("base distribution and flow dimensions differ".into()));
        }
        let (eps, ld) = self.forward(g, z)?;
        let lp = base.log_density_graph(g, eps);
        let out = g.add(lp, ld);
        if !g.value(out).all_finite() {
            return Err(Error::Numeric(format!("non-finite log-probability in flow '{}'", self.tag)));
        }
        Ok(out)
    }

    /// Negative mean log-likelihood of a `B×d` batch.
    pub fn mle_loss(&self, g: &mut Graph, base: &BaseDistribution, batch: Var) -> Result<Var> {
        if g.shape(batch).0 == 0 {
            return Err(Error::Usage("mle_loss needs a non-empty batch".into()));
        }
        let lp = self.log_prob(g, base, batch)?;
        let m = g.mean_all(lp);
        Ok(g.neg(m))
    }

    /// Data-dependent actnorm initialisation: every uninitialised actnorm is
    /// set so that its data → base output has zero mean and unit variance
    /// per dimension over `batch`.
    pub fn init_actnorm(&mut self, store: &mut ParamStore, batch: &Tensor) -> Result<()> {
        let mut h = batch.clone();
        for i in (0..self.layers.len()).rev() {
            let needs_init = matches!(&self.layers[i], FlowLayer::Glow(l) if !l.actnorm_initialized);
            if needs_init {
                let FlowLayer::Glow(layer) = &self.layers[i] else { unreachable!() };
                let u = {
                    let mut g = Graph::inference(store);
                    let x = g.constant(h.clone());
                    let (u, _) = layer.coupling.inverse(&mut g, x)?;
                    let (u, _) = layer.linear.inverse(&mut g, u)?;
                    g.value(u).clone()
                };
                let (rows, cols) = u.shape();
                let mut mean = vec![0.0; cols];
                let mut std = vec![0.0; cols];
                for r in 0..rows {
                    for (m, x) in mean.iter_mut().zip(u.row(r)) {
                        *m += x / rows as f64;
                    }
                }
                for r in 0..rows {
                    for j in 0..cols {
                        std[j] += (u.get(r, j) - mean[j]).powi(2) / rows as f64;
                    }
                }
                let scale: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-3)).collect();
                layer.actnorm.set(store, &scale, &mean);
                if let FlowLayer::Glow(l) = &mut self.layers[i] {
                    l.actnorm_initialized = true;
                }
            }
            let mut g = Graph::inference(store);
            let x = g.constant(h.clone());
            let (next, _) = self.layers[i].inverse(&mut g, x)?;
            h = g.value(next).clone();
        }
        Ok(())
    }

    /// Actnorm initialisation flags, one per layer (always true for couplings).
    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.layers
            .iter()
            .map(|l| match l {
                FlowLayer::Coupling(_) => true,
                FlowLayer::Glow(g) => g.actnorm_initialized,
            })
            .collect()
    }

    pub(crate) fn set_actnorm_flags(&mut self, flags: &[bool]) {
        for (l, &f) in self.layers.iter_mut().zip(flags) {
            if let FlowLayer::Glow(g) = l {
                g.actnorm_initialized = f;
            }
        }
    }
}

/// Cross-language latent transformation: base-to-target after source-to-base.
pub fn transform_latent_graph(g: &mut Graph, src: &FlowStack, tgt: &FlowStack, z: Var) -> Result<Var> {
    if src.dim != tgt.dim {
        return Err(Error::Config(format!("cannot transform between flows of dimension {} and {}", src.dim, tgt.dim)));
    }
    let (eps, _) = src.forward(g, z)?;
    let (out, _) = tgt.inverse(g, eps)?;
    Ok(out)
}

// ---- single-vector convenience API ------------------------------------------

fn single<F>(store: &ParamStore, z: &LatentVector, f: F) -> Result<(LatentVector, f64)>
where
    F: FnOnce(&mut Graph, Var) -> Result<(Var, Var)>,
{
    let mut g = Graph::inference(store);
    let x = g.constant(z.to_row());
    let (y, ld) = f(&mut g, x)?;
    Ok((LatentVector::new(g.value(y).data().to_vec())?, g.value(ld).data()[0]))
}

pub fn coupling_forward(store: &ParamStore, layer: &CouplingLayer, z: &LatentVector) -> Result<(LatentVector, f64)> {
    single(store, z, |g, x| layer.forward(g, x))
}

pub fn coupling_inverse(store: &ParamStore, layer: &CouplingLayer, y: &LatentVector) -> Result<(LatentVector, f64)> {
    single(store, y, |g, x| layer.inverse(g, x))
}

pub fn glow_forward(store: &ParamStore, layer: &GlowLayer, z: &LatentVector) -> Result<(LatentVector, f64)> {
    single(store, z, |g, x| layer.forward(g, x))
}

pub fn glow_inverse(store: &ParamStore, layer: &GlowLayer, y: &LatentVector) -> Result<(LatentVector, f64)> {
    single(store, y, |g, x| layer.inverse(g, x))
}

pub fn stack_forward(store: &ParamStore, stack: &FlowStack, z: &LatentVector) -> Result<(LatentVector, f64)> {
    single(store, z, |g, x| stack.forward(g, x))
}

pub fn stack_inverse(store: &ParamStore, stack: &FlowStack, eps: &LatentVector) -> Result<(LatentVector, f64)> {
    single(store, eps, |g, x| stack.inverse(g, x))
}

pub fn log_prob(store: &ParamStore, stack: &FlowStack, base: &BaseDistribution, z: &LatentVector) -> Result<f64> {
    let mut g = Graph::inference(store);
    let x = g.constant(z.to_row());
    let lp = stack.log_prob(&mut g, base, x)?;
    Ok(g.value(lp).data()[0])
}

pub fn mle_loss(store: &ParamStore, stack: &FlowStack, base: &BaseDistribution, batch: &[LatentVector]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("mle_loss needs a non-empty batch".into()));
    }
    let dim = batch[0].dim();
    if batch.iter().any(|z| z.dim() != dim) {
        return Err(Error::Usage("mle_loss batch has mixed dimensions".into()));
    }
    let rows: Vec<Vec<f64>> = batch.iter().map(|z| z.values().to_vec()).collect();
    let mut g = Graph::inference(store);
    let x = g.constant(Tensor::from_rows(&rows));
    let l = stack.mle_loss(&mut g, base, x)?;
    Ok(g.scalar(l))
}

pub fn transform_latent(
    store: &ParamStore,
    src: &FlowStack,
    tgt: &FlowStack,
    z: &LatentVector,
) -> Result<LatentVector> {
    let mut g = Graph::inference(store);
    let x = g.constant(z.to_row());
    let y = transform_latent_graph(&mut g, src, tgt, x)?;
    LatentVector::new(g.value(y).data().to_vec())
}

// ---- linear algebra helpers -------------------------------------------------

fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    // Gram-Schmidt on a Gaussian matrix
    let a = Tensor::randn(n, n, 1.0, rng);
    let mut q = Tensor::zeros(n, n);
    for c in 0..n {
        let mut v: Vec<f64> = (0..n).map(|r| a.get(r, c)).collect();
        for p in 0..c {
            let dot: f64 = (0..n).map(|r| q.get(r, p) * v[r]).sum();
            for (r, x) in v.iter_mut().enumerate() {
                *x -= dot * q.get(r, p);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (r, x) in v.iter().enumerate() {
            q.set(r, c, x / norm);
        }
    }
    q
}

/// `A = P · L · U` with partial pivoting; `perm[i]` is the column of the
/// one in row `i` of `P`.
fn lu_decompose(a: &Tensor) -> (Vec<usize>, Tensor, Tensor) {
    let n = a.rows();
    let mut u = a.clone();
    let mut l = Tensor::identity(n);
    // row_of[i]: which original row of A sits at position i of U
    let mut row_of: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| u.get(i, k).abs().total_cmp(&u.get(j, k).abs())).unwrap();
        if p != k {
            for j in 0..n {
                let (x, y) = (u.get(k, j), u.get(p, j));
                u.set(k, j, y);
                u.set(p, j, x);
            }
            for j in 0..k {
                let (x, y) = (l.get(k, j), l.get(p, j));
                l.set(k, j, y);
                l.set(p, j, x);
            }
            row_of.swap(k, p);
        }
        for i in k + 1..n {
            let f = u.get(i, k) / u.get(k, k);
            l.set(i, k, f);
            for j in k..n {
                u.set(i, j, u.get(i, j) - f * u.get(k, j));
            }
        }
    }
    // PA' = LU with A' rows permuted: A[row_of[i]] = (LU)[i]  ⇒  A = P·L·U with P[row_of[i]][i] = 1
    let mut perm = vec![0; n];
    for (i, &r) in row_of.iter().enumerate() {
        perm[r] = i;
    }
    (perm, l, u)
}
