//! Transformer (BERT-style) frame aggregation.
//!
//! Frames are projected to the model width, offset by learned positional
//! embeddings and passed through post-norm residual blocks of multi-head
//! self-attention and a GELU feed-forward. The per-frame outputs are pooled
//! into a single video vector by taking the first frame, the mean, or an
//! attention-weighted average. The cross-modal variant runs separate visual
//! and audio towers, concatenates their per-frame outputs and fuses them with
//! a third tower.
//!
//! Per-head projections `W_i^Q` (each `d_m x d_k`) are stored side by side as
//! one `d_m x d_m` matrix; head `i` owns columns `i·d_k .. (i+1)·d_k`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub positional: bool,
}

impl TransformerConfig {
    /// Feed-forward width defaults to four times the model width.
    pub fn new(input_dim: usize, model_dim: usize, heads: usize, layers: usize) -> Self {
        Self {
            input_dim,
            model_dim,
            heads,
            layers,
            ff_dim: 4 * model_dim,
            max_len: 64,
            positional: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "model width {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.input_dim == 0 || self.model_dim == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return Err(Error::invalid(format!("degenerate transformer config {self:?}")));
        }
        Ok(())
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut SeededRng) {
        let (din, d, f) = (self.input_dim, self.model_dim, self.ff_dim);
        store.init_uniform(format!("{prefix}/input_w"), din, d, din, rng);
        store.init_zeros(format!("{prefix}/input_b"), 1, d);
        store.init_uniform(format!("{prefix}/pos"), self.max_len, d, d, rng);
        for l in 0..self.layers {
            let lp = format!("{prefix}/layer{l}");
            store.init_uniform(format!("{lp}/wq"), d, d, d, rng);
            store.init_uniform(format!("{lp}/wk"), d, d, d, rng);
            store.init_uniform(format!("{lp}/wv"), d, d, d, rng);
            store.init_uniform(format!("{lp}/wo"), d, d, d, rng);
            store.init_filled(format!("{lp}/ln1_g"), 1, d, 1.0);
            store.init_zeros(format!("{lp}/ln1_b"), 1, d);
            store.init_uniform(format!("{lp}/ff1_w"), d, f, d, rng);
            store.init_zeros(format!("{lp}/ff1_b"), 1, f);
            store.init_uniform(format!("{lp}/ff2_w"), f, d, f, rng);
            store.init_zeros(format!("{lp}/ff2_b"), 1, d);
            store.init_filled(format!("{lp}/ln2_g"), 1, d, 1.0);
            store.init_zeros(format!("{lp}/ln2_b"), 1, d);
        }
    }

    /// Per-frame encodings, `L x d_m`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, prefix: &str, frames: Var) -> Result<Var> {
        self.validate()?;
        let (len, din) = g.dims(frames);
        if din != self.input_dim {
            return Err(Error::shape(format!(
                "transformer expects {} input features, got {din}",
                self.input_dim
            )));
        }
        if len == 0 {
            return Err(Error::invalid("transformer input has no frames"));
        }
        if len > self.max_len {
            return Err(Error::invalid(format!(
                "{len} frames exceed the positional table of {}",
                self.max_len
            )));
        }
        let x = g.matmul(frames, p.get(&format!("{prefix}/input_w")))?;
        let mut x = g.add_row(x, p.get(&format!("{prefix}/input_b")))?;
        if self.positional {
            let pos = g.slice_rows(p.get(&format!("{prefix}/pos")), 0, len)?;
            x = g.add(x, pos)?;
        }
        for l in 0..self.layers {
            let lp = format!("{prefix}/layer{l}");
            let w = HeadWeights {
                q: p.get(&format!("{lp}/wq")),
                k: p.get(&format!("{lp}/wk")),
                v: p.get(&format!("{lp}/wv")),
                o: p.get(&format!("{lp}/wo")),
            };
            let attn = multi_head(g, x, x, x, &w, self.heads)?;
            let res = g.add(x, attn)?;
            x = affine_layer_norm(g, res, p.get(&format!("{lp}/ln1_g")), p.get(&format!("{lp}/ln1_b")))?;

            let f = g.matmul(x, p.get(&format!("{lp}/ff1_w")))?;
            let f = g.add_row(f, p.get(&format!("{lp}/ff1_b")))?;
            let f = g.gelu(f);
            let f = g.matmul(f, p.get(&format!("{lp}/ff2_w")))?;
            let f = g.add_row(f, p.get(&format!("{lp}/ff2_b")))?;
            let res = g.add(x, f)?;
            x = affine_layer_norm(g, res, p.get(&format!("{lp}/ln2_g")), p.get(&format!("{lp}/ln2_b")))?;
        }
        Ok(x)
    }
}

fn affine_layer_norm(g: &mut Graph, x: Var, gain: Var, shift: Var) -> Result<Var> {
    let n = g.layer_norm(x, LAYER_NORM_EPS);
    let n = g.mul_row(n, gain)?;
    g.add_row(n, shift)
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (lq, dk) = g.dims(q);
    let (lk, dk2) = g.dims(k);
    let (lv, _) = g.dims(v);
    if dk != dk2 || lk != lv || dk == 0 {
        return Err(Error::shape(format!(
            "attention: Q {lq}x{dk}, K {lk}x{dk2}, V with {lv} rows"
        )));
    }
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(scores, 1)?;
    g.matmul(weights, v)
}

/// Projection matrices of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct HeadWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// `Concat(head_1..head_h) W^O` with `head_i = Attention(Q W_i^Q, K W_i^K, V W_i^V)`.
pub fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, w: &HeadWeights, heads: usize) -> Result<Var> {
    let d = g.dims(w.q).1;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let qp = g.matmul(q, w.q)?;
    let kp = g.matmul(k, w.k)?;
    let vp = g.matmul(v, w.v)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * dk, (h + 1) * dk)?;
        let kh = g.slice_cols(kp, h * dk, (h + 1) * dk)?;
        let vh = g.slice_cols(vp, h * dk, (h + 1) * dk)?;
        outs.push(scaled_dot_attention(g, qh, kh, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, w.o)
}

/// How per-frame encodings become one video vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    First,
    Mean,
    Attention,
}

impl Pooling {
    pub fn code(self) -> u8 {
        match self {
            Pooling::First => 0,
            Pooling::Mean => 1,
            Pooling::Attention => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Pooling::First),
            1 => Ok(Pooling::Mean),
            2 => Ok(Pooling::Attention),
            c => Err(Error::format(format!("unknown pooling code {c}"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::First => "first",
            Pooling::Mean => "mean",
            Pooling::Attention => "attention",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Pooling::First),
            "mean" => Ok(Pooling::Mean),
            "attention" | "attn" => Ok(Pooling::Attention),
            other => Err(Error::invalid(format!("unknown pooling mode {other}"))),
        }
    }
}

/// Pool `B` (`L x d_m`) into `1 x d_m`. `w` (`d_m x 1`) is only read in attention mode.
pub fn aggregate(g: &mut Graph, b: Var, mode: Pooling, w: Option<Var>) -> Result<Var> {
    match mode {
        Pooling::First => g.slice_rows(b, 0, 1),
        Pooling::Mean => Ok(g.mean_rows(b)),
        Pooling::Attention => {
            let w = w.ok_or_else(|| Error::invalid("attention pooling needs a weight vector"))?;
            let weights = attention_weights(g, b, w)?;
            g.matmul(weights, b)
        }
    }
}

/// `a_l = softmax_l(wᵀ b_l)`, as a `1 x L` row.
pub fn attention_weights(g: &mut Graph, b: Var, w: Var) -> Result<Var> {
    let scores = g.matmul(b, w)?;
    let scores = g.transpose(scores);
    g.softmax(scores, 1)
}

/// Visual and audio towers fused by a cross tower over their concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossModalConfig {
    pub visual: TransformerConfig,
    pub audio: TransformerConfig,
    pub cross: TransformerConfig,
}

impl CrossModalConfig {
    /// The cross tower's width is the sum of the tower widths.
    pub fn new(visual: TransformerConfig, audio: TransformerConfig, heads: usize, layers: usize) -> Self {
        let d = visual.model_dim + audio.model_dim;
        let mut cross = TransformerConfig::new(d, d, heads, layers);
        cross.max_len = visual.max_len.min(audio.max_len);
        Self { visual, audio, cross }
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.audio.validate()?;
        self.cross.validate()?;
        let d = self.visual.model_dim + self.audio.model_dim;
        if self.cross.input_dim != d || self.cross.model_dim != d {
            return Err(Error::invalid(format!(
                "cross tower width must be {d} (visual + audio)"
            )));
        }
        Ok(())
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut SeededRng) {
        self.visual.init(store, &format!("{prefix}/visual"), rng);
        self.audio.init(store, &format!("{prefix}/audio"), rng);
        self.cross.init(store, &format!("{prefix}/cross"), rng);
    }

    /// `T_cross([T_visual(F_v) ; T_audio(F_a)])`, `L x (d_v + d_a)`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, prefix: &str, visual: Var, audio: Var) -> Result<Var> {
        self.validate()?;
        if g.dims(visual).0 != g.dims(audio).0 {
            return Err(Error::shape(format!(
                "visual has {} frames, audio {}",
                g.dims(visual).0,
                g.dims(audio).0
            )));
        }
        let v = self.visual.encode(g, p, &format!("{prefix}/visual"), visual)?;
        let a = self.audio.encode(g, p, &format!("{prefix}/audio"), audio)?;
        let cat = g.concat_cols(&[v, a])?;
        self.cross.encode(g, p, &format!("{prefix}/cross"), cat)
    }
}

/// Run the encoder on a plain frame matrix with frozen parameters.
pub fn encode_frames(cfg: &TransformerConfig, params: &ParamStore, prefix: &str, frames: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(frames.clone());
    let out = cfg.encode(&mut g, &p, prefix, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::uniform(r, c, 1.0, &mut SeededRng::new(seed))
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(rand(1, 3, 1));
        let k = g.constant(rand(1, 3, 2));
        let v = g.constant(rand(1, 2, 3));
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(v)) < 1e-15);
    }

    #[test]
    fn attention_zero_query_averages_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(2, 3));
        let k = g.constant(rand(4, 3, 2));
        let vt = rand(4, 2, 3);
        let v = g.constant(vt.clone());
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|r| vt.at(r, c)).sum::<f64>() / 4.0;
            assert!((g.value(out).at(0, c) - mean).abs() < 1e-15);
            assert!((g.value(out).at(1, c) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_hand_example() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]));
        let v = g.constant(Tensor::matrix(2, 1, vec![2.0, 4.0]));
        let out = scaled_dot_attention(&mut g, q, q, v).unwrap();
        // softmax([1, 0]) = [e/(e+1), 1/(e+1)]
        let e = std::f64::consts::E;
        let want = 2.0 * e / (e + 1.0) + 4.0 / (e + 1.0);
        assert!((g.value(out).at(0, 0) - want).abs() < 1e-15);
        assert!((want - 2.5379).abs() < 1e-4);
        // second query is zero: uniform average
        assert!((g.value(out).at(1, 0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_mismatch() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(2, 3));
        let k = g.constant(Tensor::zeros(2, 2));
        assert!(scaled_dot_attention(&mut g, q, k, k).is_err());
    }

    #[test]
    fn multi_head_shape_and_zero_output() {
        let mut g = Graph::new();
        let x = g.constant(rand(5, 8, 1));
        for heads in [1, 2, 4, 8] {
            let w = HeadWeights {
                q: g.constant(rand(8, 8, 2)),
                k: g.constant(rand(8, 8, 3)),
                v: g.constant(rand(8, 8, 4)),
                o: g.constant(rand(8, 8, 5)),
            };
            let out = multi_head(&mut g, x, x, x, &w, heads).unwrap();
            assert_eq!(g.dims(out), (5, 8));
        }
        let z = g.constant(Tensor::zeros(8, 8));
        let w = HeadWeights { q: z, k: z, v: z, o: z };
        let out = multi_head(&mut g, x, x, x, &w, 2).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        assert!(matches!(multi_head(&mut g, x, x, x, &w, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let b = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let f = aggregate(&mut g, b, Pooling::First, None).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 2.0]);
        let m = aggregate(&mut g, b, Pooling::Mean, None).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 3.0]);
        let w = g.constant(Tensor::zeros(2, 1));
        let a = aggregate(&mut g, b, Pooling::Attention, Some(w)).unwrap();
        assert_eq!(g.value(a).data(), &[2.0, 3.0]);
        assert!(aggregate(&mut g, b, Pooling::Attention, None).is_err());
    }

    #[test]
    fn pooling_names_round_trip() {
        for p in [Pooling::First, Pooling::Mean, Pooling::Attention] {
            assert_eq!(p.to_string().parse::<Pooling>().unwrap(), p);
            assert_eq!(Pooling::from_code(p.code()).unwrap(), p);
        }
        assert!("max".parse::<Pooling>().is_err());
    }

    #[test]
    fn zero_layers_is_projection_plus_positions() {
        let cfg = TransformerConfig { max_len: 6, ..TransformerConfig::new(3, 4, 2, 0) };
        let mut s = ParamStore::new();
        cfg.init(&mut s, "t", &mut SeededRng::new(1));
        let frames = rand(4, 3, 9);
        let out = encode_frames(&cfg, &s, "t", &frames).unwrap();
        let proj = frames.matmul(s.get("t/input_w").unwrap()).unwrap();
        let pos = s.get("t/pos").unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = proj.at(r, c) + s.get("t/input_b").unwrap().at(0, c) + pos.at(r, c);
                assert!((out.at(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encode_checks_length_and_width() {
        let cfg = TransformerConfig { max_len: 3, ..TransformerConfig::new(3, 4, 2, 1) };
        let mut s = ParamStore::new();
        cfg.init(&mut s, "t", &mut SeededRng::new(1));
        assert!(matches!(
            encode_frames(&cfg, &s, "t", &rand(4, 3, 1)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(encode_frames(&cfg, &s, "t", &rand(2, 5, 1)), Err(Error::Shape(_))));
        assert_eq!(encode_frames(&cfg, &s, "t", &rand(3, 3, 1)).unwrap().dims2(), (3, 4));
    }

    #[test]
    fn positions_make_order_matter() {
        let cfg = TransformerConfig::new(3, 4, 2, 2);
        let mut s = ParamStore::new();
        cfg.init(&mut s, "t", &mut SeededRng::new(4));
        let frames = rand(4, 3, 5);
        let swapped = frames.gather_rows(&[1, 0, 2, 3]);
        let a = encode_frames(&cfg, &s, "t", &frames).unwrap();
        let b = encode_frames(&cfg, &s, "t", &swapped).unwrap();
        // compare the encodings of the same original frame
        assert_ne!(a.row_slice(0), b.row_slice(1));

        let plain = TransformerConfig { positional: false, ..cfg };
        let a = encode_frames(&plain, &s, "t", &frames).unwrap();
        let b = encode_frames(&plain, &s, "t", &swapped).unwrap();
        for c in 0..4 {
            assert!((a.at(0, c) - b.at(1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_modal_shapes() {
        let vis = TransformerConfig::new(32, 16, 4, 1);
        let aud = TransformerConfig::new(8, 8, 2, 1);
        let cfg = CrossModalConfig::new(vis, aud, 4, 1);
        let mut s = ParamStore::new();
        cfg.init(&mut s, "x", &mut SeededRng::new(2));
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let fv = g.constant(rand(5, 32, 1));
        let fa = g.constant(rand(5, 8, 2));
        let out = cfg.encode(&mut g, &p, "x", fv, fa).unwrap();
        assert_eq!(g.dims(out), (5, 24));
        let short = g.constant(rand(4, 8, 2));
        assert!(cfg.encode(&mut g, &p, "x", fv, short).is_err());
    }

    #[test]
    fn cross_modal_zero_layer_towers_feed_projected_concat() {
        let vis = TransformerConfig::new(6, 4, 2, 0);
        let aud = TransformerConfig::new(3, 2, 1, 0);
        let mut cfg = CrossModalConfig::new(vis, aud, 2, 0);
        cfg.cross.positional = false;
        let mut s = ParamStore::new();
        cfg.init(&mut s, "x", &mut SeededRng::new(3));
        let fv = rand(3, 6, 1);
        let fa = rand(3, 3, 2);
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let (v, a) = (g.constant(fv.clone()), g.constant(fa.clone()));
        let out = cfg.encode(&mut g, &p, "x", v, a).unwrap();
        let pv = encode_frames(&vis, &s, "x/visual", &fv).unwrap();
        let pa = encode_frames(&aud, &s, "x/audio", &fa).unwrap();
        let cat = Tensor::concat_cols(&[&pv, &pa]).unwrap();
        let want = encode_frames(&cfg.cross, &s, "x/cross", &cat).unwrap();
        assert!(g.value(out).max_abs_diff(&want) < 1e-15);
    }
}
