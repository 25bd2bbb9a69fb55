//! Gated NetVLAD video encoder.
//!
//! Frames are softly assigned to `K` learnable anchors, residuals to each
//! anchor are summed over time, every anchor's residual vector is L2
//! normalized (intra-normalization), and the flattened descriptor goes
//! through a hidden projection, context gating, an MoE head and a second
//! context gate on the class logits.
//!
//! The descriptor is laid out cluster-major: row `k` of the `K x J` matrix
//! holds anchor `k`'s residual, and flattening concatenates those rows.

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Bound, ParamStore};
use crate::classifier::MoeConfig;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Epsilon used by every L2 normalization in the aggregators.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetVladConfig {
    pub input_dim: usize,
    pub clusters: usize,
    pub hidden: usize,
    pub classes: usize,
    pub experts: usize,
}

impl NetVladConfig {
    /// Toy defaults: 16 clusters, 128 hidden units, 2 experts.
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            clusters: 16,
            hidden: 128,
            classes,
            experts: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.hidden == 0 || self.input_dim == 0 {
            return Err(Error::invalid(format!("degenerate NetVLAD config {self:?}")));
        }
        self.moe().validate()
    }

    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            input_dim: self.hidden,
            classes: self.classes,
            experts: self.experts,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        let (j, k, h, c) = (self.input_dim, self.clusters, self.hidden, self.classes);
        store.init_uniform("netvlad/centers", k, j, j, rng);
        store.init_uniform("netvlad/assign_w", j, k, j, rng);
        store.init_zeros("netvlad/assign_b", 1, k);
        store.init_uniform("netvlad/hidden_w", j * k, h, j * k, rng);
        store.init_zeros("netvlad/hidden_b", 1, h);
        store.init_uniform("netvlad/cg_w", h, h, h, rng);
        store.init_zeros("netvlad/cg_b", 1, h);
        self.moe().init(store, "moe", rng);
        store.init_uniform("netvlad/out_cg_w", c, c, c, rng);
        store.init_zeros("netvlad/out_cg_b", 1, c);
    }

    /// Class logits (after the output context gate), `1 x C`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, frames: Var) -> Result<Var> {
        let y = netvlad_encode(g, p, frames, self.clusters)?;
        let flat = g.reshape(y, 1, self.clusters * self.input_dim)?;
        let hidden = g.matmul(flat, p.get("netvlad/hidden_w"))?;
        let hidden = g.add_row(hidden, p.get("netvlad/hidden_b"))?;
        let gated = context_gate(g, hidden, p.get("netvlad/cg_w"), p.get("netvlad/cg_b"))?;
        let logits = self.moe().logits(g, p, "moe", gated)?;
        context_gate(g, logits, p.get("netvlad/out_cg_w"), p.get("netvlad/out_cg_b"))
    }
}

/// Soft assignment of each frame to the clusters, `I x K`, rows summing to one.
pub fn soft_assign(g: &mut Graph, frames: Var, weights: Var, bias: Var) -> Result<Var> {
    let (_, j) = g.dims(frames);
    if g.dims(weights).0 != j {
        return Err(Error::shape(format!(
            "soft_assign: frames have {j} features, weights {:?}",
            g.dims(weights)
        )));
    }
    let logits = g.matmul(frames, weights)?;
    let logits = g.add_row(logits, bias)?;
    g.softmax(logits, 1)
}

/// Intra-normalized VLAD descriptor, `K x J`.
pub fn netvlad_encode(g: &mut Graph, p: &Bound, frames: Var, clusters: usize) -> Result<Var> {
    let (i, _) = g.dims(frames);
    if i == 0 {
        return Err(Error::invalid("netvlad_encode: empty frame sequence"));
    }
    let assign = soft_assign(g, frames, p.get("netvlad/assign_w"), p.get("netvlad/assign_b"))?;
    debug_assert_eq!(g.dims(assign).1, clusters);
    let y = g.vlad_aggregate(assign, frames, p.get("netvlad/centers"))?;
    g.l2_normalize(y, 1, NORM_EPS)
}

/// Context gating `σ(y W + b) ∘ y` on a row vector.
pub fn context_gate(g: &mut Graph, y: Var, w: Var, b: Var) -> Result<Var> {
    let gate = g.matmul(y, w)?;
    let gate = g.add_row(gate, b)?;
    let gate = g.sigmoid(gate);
    g.mul(gate, y)
}

/// Descriptor for a plain frame matrix using the `netvlad/*` entries of `params`.
pub fn encode_frames(params: &ParamStore, frames: &Tensor, clusters: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(frames.clone());
    let y = netvlad_encode(&mut g, &p, x, clusters)?;
    Ok(g.value(y).clone())
}
