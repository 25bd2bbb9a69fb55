//! Mixture-of-experts multi-label head and the training losses built on it.
//!
//! For class `c` with experts `e = 1..E` the head outputs
//! `p_c = Σ_e softmax_e(gate_c(v)) · σ(expert_{c,e}(v))`. Models consume the
//! head through its log-odds `ln p_c - ln(1 - p_c)`, which are formed from
//! log-sum-exp terms so saturated experts never produce `ln 0`.

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Lower/upper clamp applied to probabilities before the BCE logarithm.
pub const BCE_CLAMP: f64 = 1e-7;
/// Floor applied to probabilities inside the KL logarithm.
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub experts: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.classes == 0 || self.input_dim == 0 {
            return Err(Error::invalid(format!("degenerate MoE config {self:?}")));
        }
        Ok(())
    }

    /// Adds `{prefix}/expert_w`, `expert_b`, `gate_w`, `gate_b`. Weight
    /// columns are class-major: column `c * E + e` belongs to class `c`, expert `e`.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut SeededRng) {
        let ce = self.classes * self.experts;
        store.init_uniform(format!("{prefix}/expert_w"), self.input_dim, ce, self.input_dim, rng);
        store.init_zeros(format!("{prefix}/expert_b"), 1, ce);
        store.init_uniform(format!("{prefix}/gate_w"), self.input_dim, ce, self.input_dim, rng);
        store.init_zeros(format!("{prefix}/gate_b"), 1, ce);
    }

    fn expert_and_gate(
        &self,
        g: &mut Graph,
        p: &Bound,
        prefix: &str,
        v: Var,
    ) -> Result<(Var, Var)> {
        if g.dims(v) != (1, self.input_dim) {
            return Err(Error::shape(format!(
                "MoE expects a 1x{} input, got {:?}",
                self.input_dim,
                g.dims(v)
            )));
        }
        let (c, e) = (self.classes, self.experts);
        let z = g.matmul(v, p.get(&format!("{prefix}/expert_w")))?;
        let z = g.add_row(z, p.get(&format!("{prefix}/expert_b")))?;
        let z = g.reshape(z, c, e)?;
        let gl = g.matmul(v, p.get(&format!("{prefix}/gate_w")))?;
        let gl = g.add_row(gl, p.get(&format!("{prefix}/gate_b")))?;
        let gl = g.reshape(gl, c, e)?;
        Ok((z, gl))
    }

    /// Per-class log-odds, `1 x C`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, prefix: &str, v: Var) -> Result<Var> {
        let (z, gl) = self.expert_and_gate(g, p, prefix, v)?;
        let log_gate = g.log_softmax(gl);
        let log_pos = g.log_sigmoid(z);
        let neg_z = g.scale(z, -1.0);
        let log_neg = g.log_sigmoid(neg_z);
        let a = g.add(log_gate, log_pos)?;
        let b = g.add(log_gate, log_neg)?;
        let lp = g.logsumexp(a);
        let lq = g.logsumexp(b);
        let logit = g.sub(lp, lq)?;
        Ok(g.transpose(logit))
    }

    /// Per-class gate weights, `C x E` (each row sums to one).
    pub fn gates(&self, g: &mut Graph, p: &Bound, prefix: &str, v: Var) -> Result<Var> {
        let (_, gl) = self.expert_and_gate(g, p, prefix, v)?;
        g.softmax(gl, 1)
    }

    /// Direct mixture probabilities `Σ_e gate · σ(expert)`, `1 x C`.
    pub fn probabilities(&self, g: &mut Graph, p: &Bound, prefix: &str, v: Var) -> Result<Var> {
        let (z, gl) = self.expert_and_gate(g, p, prefix, v)?;
        let gate = g.softmax(gl, 1)?;
        let s = g.sigmoid(z);
        let m = g.mul(gate, s)?;
        let pc = g.sum_cols(m);
        Ok(g.transpose(pc))
    }
}

/// Convenience: MoE class probabilities for a plain feature vector.
pub fn moe_classify(cfg: &MoeConfig, params: &ParamStore, prefix: &str, v: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(Tensor::row(v.to_vec()));
    let out = cfg.probabilities(&mut g, &p, prefix, x)?;
    Ok(g.value(out).data().to_vec())
}

/// Mean binary cross-entropy of `probs` against `labels`, optionally
/// restricted to entries where `mask` is 1. Probabilities are clamped to
/// `[1e-7, 1 - 1e-7]` before the logarithm.
pub fn bce_loss(
    g: &mut Graph,
    probs: Var,
    labels: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let dims = g.dims(probs);
    if labels.dims2() != dims || mask.is_some_and(|m| m.dims2() != dims) {
        return Err(Error::shape(format!(
            "bce: probabilities {dims:?}, labels {:?}",
            labels.dims2()
        )));
    }
    let count = mask.map_or(labels.numel() as f64, Tensor::sum);
    if count <= 0.0 {
        return Err(Error::invalid("bce: mask selects no entries"));
    }
    let pc = g.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let ln_p = g.ln(pc);
    let one_minus = g.scale(pc, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let ln_q = g.ln(one_minus);
    let y = g.constant(labels.clone());
    let not_y = g.constant(labels.map(|v| 1.0 - v));
    let a = g.mul(y, ln_p)?;
    let b = g.mul(not_y, ln_q)?;
    let ll = g.add(a, b)?;
    let ll = match mask {
        Some(m) => {
            let m = g.constant(m.clone());
            g.mul(ll, m)?
        }
        None => ll,
    };
    let total = g.sum(ll);
    Ok(g.scale(total, -1.0 / count))
}

/// `softmax(z / T)` along each row.
pub fn temp_softmax(g: &mut Graph, logits: Var, temperature: f64) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled = g.scale(logits, 1.0 / temperature);
    g.softmax(scaled, 1)
}

/// `KL(p_e || p_m) = Σ_c p_e(c) ln(p_e(c) / p_m(c))`, probabilities floored at 1e-12.
pub fn distill_kl(g: &mut Graph, p_ensemble: Var, p_model: Var) -> Result<Var> {
    if g.dims(p_ensemble) != g.dims(p_model) {
        return Err(Error::shape("distill_kl: distributions differ in shape"));
    }
    let pe = g.clamp(p_ensemble, KL_CLAMP, 1.0);
    let pm = g.clamp(p_model, KL_CLAMP, 1.0);
    let lpe = g.ln(pe);
    let lpm = g.ln(pm);
    let diff = g.sub(lpe, lpm)?;
    let terms = g.mul(p_ensemble, diff)?;
    Ok(g.sum(terms))
}

/// `Σ_m BCE(σ(z^m)) + BCE(σ(z^e)) + T² Σ_m KL(p^e || p^m)`, where the KL
/// terms use temperature-scaled softmax over classes and the BCE terms use
/// plain sigmoid probabilities.
pub fn mixture_total_loss(
    g: &mut Graph,
    sub_logits: &[Var],
    ensemble_logits: Var,
    labels: &Tensor,
    mask: Option<&Tensor>,
    temperature: f64,
) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if sub_logits.is_empty() {
        return Err(Error::invalid("mixture loss needs at least one submodel"));
    }
    let pe_sig = g.sigmoid(ensemble_logits);
    let mut total = bce_loss(g, pe_sig, labels, mask)?;
    let pe_soft = temp_softmax(g, ensemble_logits, temperature)?;
    let t2 = temperature * temperature;
    for &z in sub_logits {
        let p = g.sigmoid(z);
        let bce = bce_loss(g, p, labels, mask)?;
        total = g.add(total, bce)?;
        let pm_soft = temp_softmax(g, z, temperature)?;
        let kl = distill_kl(g, pe_soft, pm_soft)?;
        let kl = g.scale(kl, t2);
        total = g.add(total, kl)?;
    }
    Ok(total)
}
