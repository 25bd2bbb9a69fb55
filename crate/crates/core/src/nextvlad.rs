//! NeXtVLAD encoder and the distilled mixture of NeXtVLAD submodels.
//!
//! Frames are linearly expanded from `J` to `λJ` features and split into
//! `G` groups of `λJ/G`. Each (frame, group) pair is a VLAD "item" weighted by
//! a sigmoid group attention times a per-group soft cluster assignment. The
//! three-way view `I x G x (λJ/G)` is stored as an `(I·G) x (λJ/G)` matrix
//! whose row `i·G + g` is group `g` of frame `i`.

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Bound, ParamStore};
use crate::classifier::MoeConfig;
use crate::error::{Error, Result};
use crate::netvlad::NORM_EPS;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NextVladConfig {
    pub input_dim: usize,
    pub expansion: usize,
    pub groups: usize,
    pub clusters: usize,
    pub hidden: usize,
    pub reduction: usize,
    pub classes: usize,
    pub experts: usize,
}

impl NextVladConfig {
    /// Toy defaults: λ=2, G=4, K=8, H=64, r=16, logistic head (one expert).
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            expansion: 2,
            groups: 4,
            clusters: 8,
            hidden: 64,
            reduction: 16,
            classes,
            experts: 1,
        }
    }

    /// Full-scale configuration: 8 groups, 112 clusters, 2048 hidden, λ=2, r=16.
    pub fn full_scale(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            expansion: 2,
            groups: 8,
            clusters: 112,
            hidden: 2048,
            reduction: 16,
            classes,
            experts: 1,
        }
    }

    pub fn expanded_dim(&self) -> usize {
        self.expansion * self.input_dim
    }

    pub fn group_dim(&self) -> usize {
        self.expanded_dim() / self.groups
    }

    pub fn bottleneck(&self) -> usize {
        self.hidden / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.expanded_dim().is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "expanded dimension {} is not divisible by {} groups",
                self.expanded_dim(),
                self.groups
            )));
        }
        if self.reduction == 0 || !self.hidden.is_multiple_of(self.reduction) {
            return Err(Error::invalid(format!(
                "gating reduction {} does not divide hidden size {}",
                self.reduction, self.hidden
            )));
        }
        if self.clusters == 0 || self.input_dim == 0 {
            return Err(Error::invalid(format!("degenerate NeXtVLAD config {self:?}")));
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

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut SeededRng) {
        let (j, lj, gr, k, d, h, s) = (
            self.input_dim,
            self.expanded_dim(),
            self.groups,
            self.clusters,
            self.group_dim(),
            self.hidden,
            self.bottleneck(),
        );
        store.init_uniform(format!("{prefix}/expand_w"), j, lj, j, rng);
        store.init_zeros(format!("{prefix}/expand_b"), 1, lj);
        store.init_uniform(format!("{prefix}/group_w"), lj, gr, lj, rng);
        store.init_zeros(format!("{prefix}/group_b"), 1, gr);
        store.init_uniform(format!("{prefix}/assign_w"), lj, gr * k, lj, rng);
        store.init_zeros(format!("{prefix}/assign_b"), 1, gr * k);
        store.init_uniform(format!("{prefix}/centers"), k, d, d, rng);
        store.init_uniform(format!("{prefix}/hidden_w"), k * d, h, k * d, rng);
        store.init_zeros(format!("{prefix}/hidden_b"), 1, h);
        store.init_uniform(format!("{prefix}/secg_w1"), h, s, h, rng);
        store.init_zeros(format!("{prefix}/secg_b1"), 1, s);
        store.init_uniform(format!("{prefix}/secg_w2"), s, h, s, rng);
        store.init_zeros(format!("{prefix}/secg_b2"), 1, h);
        self.moe().init(store, &format!("{prefix}/moe"), rng);
    }

    /// Class logits of one submodel, `1 x C`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, prefix: &str, frames: Var) -> Result<Var> {
        let y = self.encode(g, p, prefix, frames)?;
        let flat = g.reshape(y, 1, self.clusters * self.group_dim())?;
        let hidden = g.matmul(flat, p.get(&format!("{prefix}/hidden_w")))?;
        let hidden = g.add_row(hidden, p.get(&format!("{prefix}/hidden_b")))?;
        let gated = secg(
            g,
            hidden,
            p.get(&format!("{prefix}/secg_w1")),
            p.get(&format!("{prefix}/secg_b1")),
            p.get(&format!("{prefix}/secg_w2")),
            p.get(&format!("{prefix}/secg_b2")),
        )?;
        self.moe().logits(g, p, &format!("{prefix}/moe"), gated)
    }

    /// Linear expansion (`I x λJ`) followed by the group reshape (`(I·G) x λJ/G`).
    /// Returns both views.
    pub fn expand_reshape(
        &self,
        g: &mut Graph,
        p: &Bound,
        prefix: &str,
        frames: Var,
    ) -> Result<(Var, Var)> {
        self.validate()?;
        let (i, j) = g.dims(frames);
        if j != self.input_dim {
            return Err(Error::shape(format!(
                "NeXtVLAD expects {} features, got {j}",
                self.input_dim
            )));
        }
        let x = g.matmul(frames, p.get(&format!("{prefix}/expand_w")))?;
        let x = g.add_row(x, p.get(&format!("{prefix}/expand_b")))?;
        let grouped = g.reshape(x, i * self.groups, self.group_dim())?;
        Ok((x, grouped))
    }

    /// Sigmoid attention per (frame, group), `(I·G) x 1`.
    pub fn group_attention(&self, g: &mut Graph, p: &Bound, prefix: &str, expanded: Var) -> Result<Var> {
        let (i, _) = g.dims(expanded);
        let a = g.matmul(expanded, p.get(&format!("{prefix}/group_w")))?;
        let a = g.add_row(a, p.get(&format!("{prefix}/group_b")))?;
        let a = g.sigmoid(a);
        g.reshape(a, i * self.groups, 1)
    }

    /// Soft cluster assignment per (frame, group), `(I·G) x K`.
    pub fn cluster_assign(&self, g: &mut Graph, p: &Bound, prefix: &str, expanded: Var) -> Result<Var> {
        let (i, _) = g.dims(expanded);
        let a = g.matmul(expanded, p.get(&format!("{prefix}/assign_w")))?;
        let a = g.add_row(a, p.get(&format!("{prefix}/assign_b")))?;
        let a = g.reshape(a, i * self.groups, self.clusters)?;
        g.softmax(a, 1)
    }

    /// Intra-normalized descriptor, `K x (λJ/G)`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, prefix: &str, frames: Var) -> Result<Var> {
        if g.dims(frames).0 == 0 {
            return Err(Error::invalid("nextvlad_encode: empty frame sequence"));
        }
        let (expanded, grouped) = self.expand_reshape(g, p, prefix, frames)?;
        let attn = self.group_attention(g, p, prefix, expanded)?;
        let assign = self.cluster_assign(g, p, prefix, expanded)?;
        let weights = g.mul_col(assign, attn)?;
        let y = g.vlad_aggregate(weights, grouped, p.get(&format!("{prefix}/centers")))?;
        g.l2_normalize(y, 1, NORM_EPS)
    }

    pub fn cg_param_count(&self) -> usize {
        self.hidden * self.hidden + self.hidden
    }

    pub fn secg_param_count(&self) -> usize {
        let (h, s) = (self.hidden, self.bottleneck());
        h * s + s + s * h + h
    }
}

/// Squeeze-excitation context gating: `σ(relu(h W1 + b1) W2 + b2) ∘ h`.
pub fn secg(g: &mut Graph, h: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let s = g.matmul(h, w1)?;
    let s = g.add_row(s, b1)?;
    let s = g.relu(s);
    let e = g.matmul(s, w2)?;
    let e = g.add_row(e, b2)?;
    let e = g.sigmoid(e);
    g.mul(e, h)
}

/// Gate weights over submodels from the frame mean, `1 x M`.
pub fn mixture_weights(g: &mut Graph, frame_mean: Var, w: Var, b: Var) -> Result<Var> {
    let a = g.matmul(frame_mean, w)?;
    let a = g.add_row(a, b)?;
    g.softmax(a, 1)
}

/// `z^e = Σ_m α_m z^m` with `α` from [`mixture_weights`].
pub fn mix_logits(g: &mut Graph, sub_logits: &[Var], alpha: Var) -> Result<Var> {
    if sub_logits.is_empty() || g.dims(alpha) != (1, sub_logits.len()) {
        return Err(Error::shape(format!(
            "mix_logits: {} submodels, weights {:?}",
            sub_logits.len(),
            g.dims(alpha)
        )));
    }
    let mut acc: Option<Var> = None;
    for (m, &z) in sub_logits.iter().enumerate() {
        let a = g.slice_cols(alpha, m, m + 1)?;
        let term = g.mul_col(z, a)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one submodel"))
}

/// Mixture of NeXtVLAD submodels with on-the-fly distillation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixNextVladConfig {
    pub sub: NextVladConfig,
    pub submodels: usize,
    pub temperature: f64,
}

/// Forward outputs of the mixture model.
#[derive(Debug, Clone)]
pub struct MixOutput {
    pub ensemble: Var,
    pub submodels: Vec<Var>,
}

impl MixNextVladConfig {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self {
            sub: NextVladConfig::new(input_dim, classes),
            submodels: 3,
            temperature: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.submodels == 0 {
            return Err(Error::invalid("mixture needs at least one submodel"));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        self.sub.validate()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        for m in 0..self.submodels {
            self.sub.init(store, &format!("nextvlad/{m}"), rng);
        }
        let j = self.sub.input_dim;
        store.init_uniform("mixture/gate_w", j, self.submodels, j, rng);
        store.init_zeros("mixture/gate_b", 1, self.submodels);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, frames: Var) -> Result<MixOutput> {
        let subs = (0..self.submodels)
            .map(|m| self.sub.logits(g, p, &format!("nextvlad/{m}"), frames))
            .collect::<Result<Vec<_>>>()?;
        let mean = g.mean_rows(frames);
        let alpha = mixture_weights(g, mean, p.get("mixture/gate_w"), p.get("mixture/gate_b"))?;
        let ensemble = mix_logits(g, &subs, alpha)?;
        Ok(MixOutput {
            ensemble,
            submodels: subs,
        })
    }
}

/// Descriptor for a plain frame matrix using entries under `prefix`.
pub fn encode_frames(cfg: &NextVladConfig, params: &ParamStore, prefix: &str, frames: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(frames.clone());
    let y = cfg.encode(&mut g, &p, prefix, x)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NextVladConfig {
        NextVladConfig {
            input_dim: 6,
            expansion: 2,
            groups: 3,
            clusters: 2,
            hidden: 4,
            reduction: 2,
            classes: 3,
            experts: 1,
        }
    }

    fn store(cfg: &NextVladConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        cfg.init(&mut s, "nv", &mut SeededRng::new(seed));
        s
    }

    #[test]
    fn expand_reshape_shapes() {
        let cfg = NextVladConfig { input_dim: 6, expansion: 2, groups: 3, ..tiny() };
        let s = store(&cfg, 1);
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let x = g.constant(Tensor::uniform(4, 6, 1.0, &mut SeededRng::new(2)));
        let (e, r) = cfg.expand_reshape(&mut g, &p, "nv", x).unwrap();
        assert_eq!(g.dims(e), (4, 12));
        // (4, 3, 4) stored as 12 x 4
        assert_eq!(g.dims(r), (12, 4));
    }

    #[test]
    fn full_scale_group_dim() {
        let cfg = NextVladConfig { groups: 8, ..NextVladConfig::new(1024 + 128, 10) };
        assert_eq!(cfg.group_dim(), 288);
        cfg.validate().unwrap();
    }

    #[test]
    fn unit_expansion_single_group_reshape_is_identity() {
        let cfg = NextVladConfig { expansion: 1, groups: 1, ..tiny() };
        let s = store(&cfg, 1);
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let x = g.constant(Tensor::uniform(3, 6, 1.0, &mut SeededRng::new(2)));
        let (e, r) = cfg.expand_reshape(&mut g, &p, "nv", x).unwrap();
        assert_eq!(g.value(e), g.value(r));
    }

    #[test]
    fn divisibility_is_checked() {
        let cfg = NextVladConfig { groups: 5, ..tiny() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        let cfg = NextVladConfig { reduction: 3, ..tiny() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn group_attention_examples() {
        let cfg = tiny();
        let mut s = store(&cfg, 3);
        s.get_mut("nv/group_w").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let x = g.constant(Tensor::uniform(2, 12, 1.0, &mut SeededRng::new(2)));
        let a = cfg.group_attention(&mut g, &p, "nv", x).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.5));

        s.get_mut("nv/group_b").unwrap().data_mut().fill(100.0);
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let x = g.constant(Tensor::uniform(2, 12, 1.0, &mut SeededRng::new(2)));
        let a = cfg.group_attention(&mut g, &p, "nv", x).unwrap();
        assert!(g.value(a).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn group_attention_monotone_in_bias() {
        let cfg = tiny();
        let mut s = store(&cfg, 3);
        let x = Tensor::uniform(2, 12, 1.0, &mut SeededRng::new(4));
        let mut prev: Option<Vec<f64>> = None;
        for b in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            s.get_mut("nv/group_b").unwrap().data_mut().fill(b);
            let mut g = Graph::new();
            let p = s.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            let a = cfg.group_attention(&mut g, &p, "nv", xv).unwrap();
            let cur = g.value(a).data().to_vec();
            if let Some(prev) = prev {
                assert!(cur.iter().zip(&prev).all(|(c, p)| c > p));
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn centers_under_hard_assignment_encode_to_zero() {
        let cfg = NextVladConfig { expansion: 1, groups: 2, ..tiny() };
        let mut s = store(&cfg, 5);
        let lj = cfg.expanded_dim();
        let ident = Tensor::identity(lj);
        s.insert("nv/expand_w", ident);
        s.get_mut("nv/assign_w").unwrap().data_mut().fill(0.0);
        // cluster 0 dominates for both groups
        let b = s.get_mut("nv/assign_b").unwrap();
        b.data_mut().copy_from_slice(&[800.0, 0.0, 800.0, 0.0]);
        let c0 = s.get("nv/centers").unwrap().row_slice(0).to_vec();
        let frame: Vec<f64> = c0.iter().chain(c0.iter()).copied().collect();
        let frames = Tensor::from_rows(&[frame.clone(), frame]);
        let y = encode_frames(&cfg, &s, "nv", &frames).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn secg_examples_and_parameter_count() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::row(vec![1.0, -2.0, 4.0, 0.5]));
        let w1 = g.constant(Tensor::zeros(4, 2));
        let b1 = g.constant(Tensor::zeros(1, 2));
        let w2 = g.constant(Tensor::zeros(2, 4));
        let b2 = g.constant(Tensor::zeros(1, 4));
        let out = secg(&mut g, h, w1, b1, w2, b2).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.0, 2.0, 0.25]);
        let hz = g.constant(Tensor::zeros(1, 4));
        let out = secg(&mut g, hz, w1, b1, w2, b2).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        let cfg = NextVladConfig::new(40, 10);
        let s = store(&cfg, 1);
        let counted = s.numel_with_prefix("nv/secg");
        assert_eq!(counted, cfg.secg_param_count());
        let h = cfg.hidden;
        assert_eq!(counted, 2 * h * h / 16 + h / 16 + h);
        let ratio = cfg.cg_param_count() as f64 / counted as f64;
        assert!((ratio - 8.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn mix_logits_examples() {
        let mut g = Graph::new();
        let z: Vec<Var> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&v| g.constant(Tensor::row(vec![v, -v])))
            .collect();
        let alpha = g.constant(Tensor::row(vec![0.7, 0.2, 0.1]));
        let ze = mix_logits(&mut g, &z, alpha).unwrap();
        assert!((g.value(ze).at(0, 0) - 1.4).abs() < 1e-12);
        assert!((g.value(ze).at(0, 1) + 1.4).abs() < 1e-12);

        let mean = g.constant(Tensor::row(vec![0.3, 0.1]));
        let w0 = g.constant(Tensor::zeros(2, 3));
        let b0 = g.constant(Tensor::zeros(1, 3));
        let a = mixture_weights(&mut g, mean, w0, b0).unwrap();
        let ze = mix_logits(&mut g, &z, a).unwrap();
        assert!((g.value(ze).at(0, 0) - 2.0).abs() < 1e-12);

        let one = g.constant(Tensor::row(vec![1.0]));
        let ze = mix_logits(&mut g, &z[..1], one).unwrap();
        assert_eq!(g.value(ze), g.value(z[0]));
        assert!(mix_logits(&mut g, &z, one).is_err());
    }
}
