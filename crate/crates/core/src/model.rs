//! The four model families behind one interface, plus checkpointing.
//!
//! A checkpoint stores the trainable parameters alongside a `meta/config`
//! row that records the family and every architectural size, so a model can
//! be rebuilt from the file alone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Bound, ParamStore};
use crate::classifier::{bce_loss, mixture_total_loss, MoeConfig};
use crate::error::{Error, Result};
use crate::netvlad::NetVladConfig;
use crate::nextvlad::{MixNextVladConfig, NextVladConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::transformer::{aggregate, CrossModalConfig, Pooling, TransformerConfig};

const META_KEY: &str = "meta/config";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    NetVlad,
    NextVladMix,
    Bert,
    BertCross,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::NetVlad, Family::NextVladMix, Family::Bert, Family::BertCross];

    pub fn name(self) -> &'static str {
        match self {
            Family::NetVlad => "netvlad",
            Family::NextVladMix => "nextvlad_mix",
            Family::Bert => "bert",
            Family::BertCross => "bert_cross",
        }
    }

    fn code(self) -> f64 {
        match self {
            Family::NetVlad => 0.0,
            Family::NextVladMix => 1.0,
            Family::Bert => 2.0,
            Family::BertCross => 3.0,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model family {s}")))
    }
}

/// Transformer encoder, pooling and MoE head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BertConfig {
    pub encoder: TransformerConfig,
    pub pooling: Pooling,
    pub classes: usize,
    pub experts: usize,
}

impl BertConfig {
    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            input_dim: self.encoder.model_dim,
            classes: self.classes,
            experts: self.experts,
        }
    }
}

/// Cross-modal towers, pooling and MoE head. Input columns `0..visual_dim`
/// feed the visual tower, the rest the audio tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BertCrossConfig {
    pub towers: CrossModalConfig,
    pub pooling: Pooling,
    pub classes: usize,
    pub experts: usize,
}

impl BertCrossConfig {
    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            input_dim: self.towers.cross.model_dim,
            classes: self.classes,
            experts: self.experts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelSpec {
    NetVlad(NetVladConfig),
    NextVladMix(MixNextVladConfig),
    Bert(BertConfig),
    BertCross(BertCrossConfig),
}

/// Forward outputs: the model's class logits and, for the mixture, each submodel's.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Var,
    pub submodels: Vec<Var>,
}

impl ModelSpec {
    /// Desk-scale defaults for a family over `visual_dim + audio_dim` features.
    pub fn default_for(family: Family, visual_dim: usize, audio_dim: usize, classes: usize) -> Self {
        let j = visual_dim + audio_dim;
        match family {
            Family::NetVlad => ModelSpec::NetVlad(NetVladConfig {
                clusters: 8,
                hidden: 64,
                ..NetVladConfig::new(j, classes)
            }),
            Family::NextVladMix => {
                let mut m = MixNextVladConfig::new(j, classes);
                m.sub.reduction = 8;
                m.sub.groups = if (2 * j).is_multiple_of(4) { 4 } else { 2 };
                ModelSpec::NextVladMix(m)
            }
            Family::Bert => ModelSpec::Bert(BertConfig {
                encoder: TransformerConfig::new(j, 32, 4, 2),
                pooling: Pooling::Mean,
                classes,
                experts: 2,
            }),
            Family::BertCross => {
                let vis = TransformerConfig::new(visual_dim, 16, 4, 1);
                let aud = TransformerConfig::new(audio_dim.max(1), 8, 2, 1);
                ModelSpec::BertCross(BertCrossConfig {
                    towers: CrossModalConfig::new(vis, aud, 4, 1),
                    pooling: Pooling::Mean,
                    classes,
                    experts: 2,
                })
            }
        }
    }

    pub fn family(&self) -> Family {
        match self {
            ModelSpec::NetVlad(_) => Family::NetVlad,
            ModelSpec::NextVladMix(_) => Family::NextVladMix,
            ModelSpec::Bert(_) => Family::Bert,
            ModelSpec::BertCross(_) => Family::BertCross,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::NetVlad(c) => c.input_dim,
            ModelSpec::NextVladMix(c) => c.sub.input_dim,
            ModelSpec::Bert(c) => c.encoder.input_dim,
            ModelSpec::BertCross(c) => c.towers.visual.input_dim + c.towers.audio.input_dim,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::NetVlad(c) => c.classes,
            ModelSpec::NextVladMix(c) => c.sub.classes,
            ModelSpec::Bert(c) => c.classes,
            ModelSpec::BertCross(c) => c.classes,
        }
    }

    /// Longest frame sequence the model accepts, if bounded.
    pub fn max_len(&self) -> Option<usize> {
        match self {
            ModelSpec::Bert(c) => Some(c.encoder.max_len),
            ModelSpec::BertCross(c) => Some(c.towers.visual.max_len.min(c.towers.audio.max_len).min(c.towers.cross.max_len)),
            _ => None,
        }
    }

    /// Set the pooling mode of transformer families; other families ignore it.
    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        match &mut self {
            ModelSpec::Bert(c) => c.pooling = pooling,
            ModelSpec::BertCross(c) => c.pooling = pooling,
            _ => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::NetVlad(c) => c.validate(),
            ModelSpec::NextVladMix(c) => c.validate(),
            ModelSpec::Bert(c) => {
                c.encoder.validate()?;
                c.moe().validate()
            }
            ModelSpec::BertCross(c) => {
                c.towers.validate()?;
                c.moe().validate()
            }
        }
    }

    pub fn init(&self, rng: &mut SeededRng) -> Result<ParamStore> {
        self.validate()?;
        let mut s = ParamStore::new();
        match self {
            ModelSpec::NetVlad(c) => c.init(&mut s, rng),
            ModelSpec::NextVladMix(c) => c.init(&mut s, rng),
            ModelSpec::Bert(c) => {
                c.encoder.init(&mut s, "bert", rng);
                let d = c.encoder.model_dim;
                s.init_uniform("bert/pool_w", d, 1, d, rng);
                c.moe().init(&mut s, "moe", rng);
            }
            ModelSpec::BertCross(c) => {
                c.towers.init(&mut s, "bert_cross", rng);
                let d = c.towers.cross.model_dim;
                s.init_uniform("bert_cross/pool_w", d, 1, d, rng);
                c.moe().init(&mut s, "moe", rng);
            }
        }
        Ok(s)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, frames: Var) -> Result<ModelOutput> {
        let (_, width) = g.dims(frames);
        if width != self.input_dim() {
            return Err(Error::shape(format!(
                "model expects {} features per frame, got {width}",
                self.input_dim()
            )));
        }
        let single = |logits| ModelOutput { logits, submodels: Vec::new() };
        match self {
            ModelSpec::NetVlad(c) => Ok(single(c.logits(g, p, frames)?)),
            ModelSpec::NextVladMix(c) => {
                let out = c.forward(g, p, frames)?;
                Ok(ModelOutput { logits: out.ensemble, submodels: out.submodels })
            }
            ModelSpec::Bert(c) => {
                let enc = c.encoder.encode(g, p, "bert", frames)?;
                let pooled = aggregate(g, enc, c.pooling, Some(p.get("bert/pool_w")))?;
                Ok(single(c.moe().logits(g, p, "moe", pooled)?))
            }
            ModelSpec::BertCross(c) => {
                let dv = c.towers.visual.input_dim;
                let vis = g.slice_cols(frames, 0, dv)?;
                let aud = g.slice_cols(frames, dv, width)?;
                let enc = c.towers.encode(g, p, "bert_cross", vis, aud)?;
                let pooled = aggregate(g, enc, c.pooling, Some(p.get("bert_cross/pool_w")))?;
                Ok(single(c.moe().logits(g, p, "moe", pooled)?))
            }
        }
    }

    /// Training loss of one example: BCE for single models, the distillation
    /// objective for the mixture. `labels` and `mask` are `1 x C`.
    pub fn loss(&self, g: &mut Graph, p: &Bound, frames: Var, labels: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
        let out = self.forward(g, p, frames)?;
        match self {
            ModelSpec::NextVladMix(c) => {
                mixture_total_loss(g, &out.submodels, out.logits, labels, mask, c.temperature)
            }
            _ => {
                let probs = g.sigmoid(out.logits);
                bce_loss(g, probs, labels, mask)
            }
        }
    }

    fn meta(&self) -> Vec<f64> {
        let f = |v: usize| v as f64;
        let tower = |t: &TransformerConfig| [f(t.input_dim), f(t.model_dim), f(t.heads), f(t.layers), f(t.ff_dim), f(t.max_len), f(usize::from(t.positional))];
        let mut m = vec![self.family().code()];
        match self {
            ModelSpec::NetVlad(c) => m.extend([c.input_dim, c.clusters, c.hidden, c.classes, c.experts].map(f)),
            ModelSpec::NextVladMix(c) => {
                let s = &c.sub;
                m.extend(
                    [s.input_dim, s.expansion, s.groups, s.clusters, s.hidden, s.reduction, s.classes, s.experts, c.submodels]
                        .map(f),
                );
                m.push(c.temperature);
            }
            ModelSpec::Bert(c) => {
                m.extend(tower(&c.encoder));
                m.extend([f(usize::from(c.pooling.code())), f(c.classes), f(c.experts)]);
            }
            ModelSpec::BertCross(c) => {
                m.extend(tower(&c.towers.visual));
                m.extend(tower(&c.towers.audio));
                m.extend(tower(&c.towers.cross));
                m.extend([f(usize::from(c.pooling.code())), f(c.classes), f(c.experts)]);
            }
        }
        m
    }

    fn from_meta(m: &[f64]) -> Result<Self> {
        let bad = || Error::format(format!("malformed model metadata {m:?}"));
        let ints: Vec<usize> = m
            .iter()
            .map(|&v| if v >= 0.0 && v.fract() == 0.0 && v < 1e9 { Some(v as usize) } else { None })
            .collect::<Option<Vec<_>>>()
            .unwrap_or_default();
        let tower = |t: &[usize]| TransformerConfig {
            input_dim: t[0],
            model_dim: t[1],
            heads: t[2],
            layers: t[3],
            ff_dim: t[4],
            max_len: t[5],
            positional: t[6] != 0,
        };
        let pooling = |c: usize| u8::try_from(c).map_err(|_| bad()).and_then(|c| Pooling::from_code(c).map_err(|_| bad()));
        let spec = match (m.first().copied(), m.len()) {
            (Some(x), 6) if x == 0.0 && ints.len() == 6 => ModelSpec::NetVlad(NetVladConfig {
                input_dim: ints[1],
                clusters: ints[2],
                hidden: ints[3],
                classes: ints[4],
                experts: ints[5],
            }),
            (Some(1.0), 11) => {
                let i: Vec<usize> = m[..10]
                    .iter()
                    .map(|&v| if v >= 0.0 && v.fract() == 0.0 { Some(v as usize) } else { None })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(bad)?;
                ModelSpec::NextVladMix(MixNextVladConfig {
                    sub: NextVladConfig {
                        input_dim: i[1],
                        expansion: i[2],
                        groups: i[3],
                        clusters: i[4],
                        hidden: i[5],
                        reduction: i[6],
                        classes: i[7],
                        experts: i[8],
                    },
                    submodels: i[9],
                    temperature: m[10],
                })
            }
            (Some(x), 11) if x == 2.0 && ints.len() == 11 => ModelSpec::Bert(BertConfig {
                encoder: tower(&ints[1..8]),
                pooling: pooling(ints[8])?,
                classes: ints[9],
                experts: ints[10],
            }),
            (Some(x), 25) if x == 3.0 && ints.len() == 25 => ModelSpec::BertCross(BertCrossConfig {
                towers: CrossModalConfig {
                    visual: tower(&ints[1..8]),
                    audio: tower(&ints[8..15]),
                    cross: tower(&ints[15..22]),
                },
                pooling: pooling(ints[22])?,
                classes: ints[23],
                experts: ints[24],
            }),
            _ => return Err(bad()),
        };
        spec.validate().map_err(|e| Error::format(format!("invalid model metadata: {e}")))?;
        Ok(spec)
    }
}

/// Architecture plus trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = spec.init(&mut SeededRng::new(seed))?;
        Ok(Self { spec, params })
    }

    /// Class probabilities for an `I x D` frame matrix.
    pub fn predict(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(frames.clone());
        let out = self.spec.forward(&mut g, &p, x)?;
        let probs = g.sigmoid(out.logits);
        Ok(g.value(probs).data().to_vec())
    }

    /// Parameters followed by the metadata row.
    pub fn to_store(&self) -> ParamStore {
        let mut s = self.params.clone();
        s.insert(META_KEY, Tensor::row(self.spec.meta()));
        s
    }

    /// Rebuild from a checkpoint store, checking every parameter's presence and shape.
    pub fn from_store(mut store: ParamStore) -> Result<Self> {
        let meta = store.require(META_KEY)?.data().to_vec();
        let spec = ModelSpec::from_meta(&meta)?;
        let template = spec.init(&mut SeededRng::new(0))?;
        let mut params = ParamStore::new();
        for (name, t) in template.iter() {
            let got = store
                .get_mut(name)
                .ok_or_else(|| Error::format(format!("checkpoint is missing {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::format(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            params.insert(name, std::mem::replace(got, Tensor::scalar(0.0)));
        }
        if store.len() != template.len() + 1 {
            return Err(Error::format("checkpoint has entries the model does not use"));
        }
        Ok(Self { spec, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(ParamStore::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ModelSpec> {
        let mut out: Vec<ModelSpec> = Family::ALL.iter().map(|&f| ModelSpec::default_for(f, 6, 2, 3)).collect();
        out.push(ModelSpec::default_for(Family::Bert, 6, 2, 3).with_pooling(Pooling::Attention));
        out
    }

    #[test]
    fn every_family_predicts_probabilities() {
        let frames = Tensor::uniform(7, 8, 1.0, &mut SeededRng::new(1));
        for spec in specs() {
            let m = Model::new(spec, 3).unwrap();
            let p = m.predict(&frames).unwrap();
            assert_eq!(p.len(), 3);
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)), "{spec:?}");
            assert!(m.predict(&Tensor::zeros(7, 9)).is_err());
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_predictions() {
        let frames = Tensor::uniform(5, 8, 1.0, &mut SeededRng::new(2));
        for spec in specs() {
            let m = Model::new(spec, 4).unwrap();
            let bytes = m.to_store().to_bytes().unwrap();
            let back = Model::from_store(ParamStore::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.predict(&frames).unwrap(), m.predict(&frames).unwrap());
            assert_eq!(back.to_store().to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn incompatible_checkpoints_are_rejected() {
        let m = Model::new(specs()[0], 1).unwrap();
        let mut s = m.to_store();
        s.insert("netvlad/hidden_b", Tensor::zeros(1, 2));
        assert!(matches!(Model::from_store(s), Err(Error::Format(_))));
        let mut s = m.to_store();
        s.insert("extra", Tensor::scalar(1.0));
        assert!(matches!(Model::from_store(s), Err(Error::Format(_))));
        let mut s = m.to_store();
        s.insert(META_KEY, Tensor::row(vec![7.0]));
        assert!(matches!(Model::from_store(s), Err(Error::Format(_))));
        assert!(matches!(Model::from_store(m.params.clone()), Err(Error::Format(_))));
    }

    #[test]
    fn family_names() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("resnet".parse::<Family>().is_err());
    }
}
