//! Sentence-level latent pooling and gated fusion of the latent into
//! decoder outputs.

use rand::Rng;

use crate::autograd::{Graph, Segment, Var};
use crate::error::{Error, Result};
use crate::flow::LatentVector;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Trainable `d_model → d_z` projection applied after pooling.
#[derive(Clone, Debug)]
pub struct ProjectionMap {
    pub w: ParamId,
    d_model: usize,
    d_z: usize,
}

impl ProjectionMap {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_model: usize, d_z: usize, rng: &mut R) -> Self {
        Self { w: store.add(format!("{prefix}.w"), Tensor::glorot(d_model, d_z, rng)), d_model, d_z }
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

/// `z = (maxpool(H) + meanpool(H) + h_0) · W` for each segment of rows;
/// `h_0` is the first row of the segment.
pub fn pool_graph(g: &mut Graph, states: Var, segments: &[Segment], proj: &ProjectionMap) -> Var {
    let max = g.segment_max(states, segments);
    let mean = g.segment_mean(states, segments);
    let firsts: Vec<usize> = segments.iter().map(|s| s.start).collect();
    let h0 = g.gather_rows(states, &firsts);
    let sum = g.add(max, mean);
    let sum = g.add(sum, h0);
    let w = g.param(proj.w);
    g.matmul(sum, w)
}

/// Pool one sentence's `(S+1) × d_model` encoder states.
pub fn pool_representation(store: &ParamStore, states: &Tensor, proj: &ProjectionMap) -> Result<LatentVector> {
    if states.rows() == 0 {
        return Err(Error::Usage("cannot pool an empty set of encoder states".into()));
    }
    if states.cols() != proj.d_model {
        return Err(Error::Config(format!(
            "encoder states have width {}, projection expects {}",
            states.cols(),
            proj.d_model
        )));
    }
    let mut g = Graph::inference(store);
    let h = g.constant(states.clone());
    let z = pool_graph(&mut g, h, &[Segment { start: 0, len: states.rows() }], proj);
    LatentVector::new(g.value(z).data().to_vec())
}

/// Gate `g = σ([s; z]·W_g + b_g)` and fusion `o = (1 − g)⊙s + g⊙z′`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub w: ParamId,
    pub b: ParamId,
    /// `d_z → d_out` map, present only when the widths differ.
    pub latent_proj: Option<ParamId>,
    d_out: usize,
    d_z: usize,
}

impl GateParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_out: usize, d_z: usize, rng: &mut R) -> Self {
        let latent_proj = (d_z != d_out).then(|| store.add(format!("{prefix}.latent_proj"), Tensor::zeros(d_z, d_out)));
        Self {
            w: store.add(format!("{prefix}.w"), Tensor::glorot(d_out + d_z, d_out, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(1, d_out)),
            latent_proj,
            d_out,
            d_z,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w, self.b];
        v.extend(self.latent_proj);
        v
    }

    /// Gate activations for rows of `s` paired with rows of `z`.
    pub fn gate(&self, g: &mut Graph, s: Var, z: Var) -> Var {
        let sz = g.concat_cols(&[s, z]);
        let w = g.param(self.w);
        let b = g.param(self.b);
        let a = g.matmul(sz, w);
        let a = g.add_row(a, b);
        g.sigmoid(a)
    }

    /// Fuse row-aligned `s` (`n × d_out`) and `z` (`n × d_z`).
    pub fn fuse(&self, g: &mut Graph, s: Var, z: Var) -> Var {
        let gate = self.gate(g, s, z);
        let zp = match self.latent_proj {
            Some(p) => {
                let p = g.param(p);
                g.matmul(z, p)
            }
            None => z,
        };
        // (1 − g)⊙s + g⊙z′ = s + g⊙(z′ − s)
        let diff = g.sub(zp, s);
        let mixed = g.mul(gate, diff);
        g.add(s, mixed)
    }
}

/// Single-vector fusion.
pub fn gate_fuse(store: &ParamStore, s: &[f64], z: &LatentVector, gate: &GateParams) -> Result<Vec<f64>> {
    if s.len() != gate.d_out || z.dim() != gate.d_z {
        return Err(Error::Config(format!(
            "gate expects ({}, {}) inputs, got ({}, {})",
            gate.d_out,
            gate.d_z,
            s.len(),
            z.dim()
        )));
    }
    let mut g = Graph::inference(store);
    let sv = g.constant(Tensor::row_vector(s.to_vec()));
    let zv = g.constant(z.to_row());
    let o = gate.fuse(&mut g, sv, zv);
    Ok(g.value(o).data().to_vec())
}
