//! Pretraining on video-level labels and fine-tuning on segment ratings.
//!
//! Both stages use Adam with an exponentially decaying learning rate,
//! `lr = lr0 · decay^(examples_seen / decay_interval)`, evaluated
//! continuously rather than in steps. Training is single-threaded and fully
//! determined by the seed.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::Graph;
use crate::checkpoint::ParamStore;
use crate::data::{extract_segment, sample_frames, FrameSequence, SampleMode, SegmentLabel};
use crate::error::{Error, Result};
use crate::infer::{infer, InferConfig};
use crate::metrics::GroundTruth;
use crate::model::Model;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    /// Examples per decay period.
    pub decay_interval: usize,
    pub steps: usize,
    pub seed: u64,
    /// Frames drawn from each video during pretraining.
    pub sample_frames: usize,
    pub sample_mode: SampleMode,
    /// Fine-tuning evaluates the holdout split every this many steps.
    pub eval_every: usize,
    /// MAP cutoff for checkpoint selection.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            decay: 0.9,
            decay_interval: 10_000,
            steps: 2_000,
            seed: 0,
            sample_frames: 30,
            sample_mode: SampleMode::Subsequence,
            eval_every: 50,
            k: crate::metrics::DEFAULT_K,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 || self.decay_interval == 0 || self.sample_frames == 0 || self.eval_every == 0 {
            return Err(Error::invalid("batch size, decay interval, frame count and eval interval must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, examples_seen: usize) -> f64 {
        learning_rate(self.learning_rate, self.decay, self.decay_interval, examples_seen)
    }
}

pub fn learning_rate(lr0: f64, decay: f64, interval: usize, examples_seen: usize) -> f64 {
    lr0 * decay.powf(examples_seen as f64 / interval as f64)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| t.map(|_| 0.0)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Update `params` in place; `grads` follow the store's entry order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub examples: usize,
    pub lr: f64,
    pub loss: f64,
}

/// One training example: frames, targets and which targets count.
#[derive(Debug, Clone)]
struct Example {
    frames: Tensor,
    labels: Tensor,
    mask: Option<Tensor>,
}

/// Mean loss over `batch`, its gradients applied with the scheduled rate.
fn train_step(model: &mut Model, opt: &mut Adam, batch: &[Example], lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let mut total = None;
    for ex in batch {
        let x = g.constant(ex.frames.clone());
        let l = model.spec.loss(&mut g, &p, x, &ex.labels, ex.mask.as_ref())?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::invalid(format!("training diverged (loss {value})")));
    }
    let grads = g.backward(loss)?;
    let grads: Vec<Tensor> = p
        .vars()
        .zip(model.params.iter())
        .map(|(v, (_, t))| grads.get_or_zeros(v, t))
        .collect();
    opt.step(&mut model.params, &grads, lr);
    Ok(value)
}

/// Train on whole-video samples against video-level labels.
pub fn pretrain(mut model: Model, cfg: &TrainConfig, videos: &[FrameSequence]) -> Result<(Model, Vec<LogEntry>)> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::invalid("no pretraining videos"));
    }
    check_dims(&model, videos)?;
    let frames = cfg.sample_frames.min(model.spec.max_len().unwrap_or(usize::MAX));
    let classes = model.spec.classes();
    let mut rng = SeededRng::new(cfg.seed).fork(0x5052);
    let mut opt = Adam::new(&model.params);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut seen = 0;
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let v = &videos[rng.below(videos.len())];
                Ok(Example {
                    frames: sample_frames(v, frames, cfg.sample_mode, &mut rng)?,
                    labels: v.label_row(classes),
                    mask: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lr = cfg.lr_at(seen);
        let loss = train_step(&mut model, &mut opt, &batch, lr)?;
        log.push(LogEntry { step, examples: seen, lr, loss });
        seen += batch.len();
    }
    Ok((model, log))
}

fn check_dims(model: &Model, videos: &[FrameSequence]) -> Result<()> {
    let want = model.spec.input_dim();
    if let Some(v) = videos.iter().find(|v| v.visual_dim() + v.audio_dim() != want) {
        return Err(Error::shape(format!(
            "video {} has {} features per frame, the model expects {want}",
            v.id,
            v.visual_dim() + v.audio_dim()
        )));
    }
    Ok(())
}

/// Segment-rated data: the videos and the ratings that refer to them.
#[derive(Debug, Clone, Copy)]
pub struct SegmentSet<'a> {
    pub videos: &'a [FrameSequence],
    pub labels: &'a [SegmentLabel],
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    /// Parameters at the evaluation with the best holdout MAP.
    pub model: Model,
    pub log: Vec<LogEntry>,
    /// `(step, holdout MAP)` for every evaluation.
    pub evaluations: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_map: f64,
}

/// Rated locations grouped as `(video index, start) -> (labels, mask)` rows.
fn segment_examples(set: &SegmentSet<'_>, classes: usize) -> Result<Vec<(usize, usize, Tensor, Tensor)>> {
    let index: HashMap<&str, usize> = set.videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
    let mut rows: BTreeMap<(usize, usize), (Tensor, Tensor)> = BTreeMap::new();
    for l in set.labels {
        let vi = *index
            .get(l.video.as_str())
            .ok_or_else(|| Error::invalid(format!("rating for unknown video {}", l.video)))?;
        let c = usize::from(l.class);
        if c >= classes {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        let (y, m) = rows
            .entry((vi, l.start))
            .or_insert_with(|| (Tensor::zeros(1, classes), Tensor::zeros(1, classes)));
        y.set(0, c, f64::from(u8::from(l.positive)));
        m.set(0, c, 1.0);
    }
    Ok(rows.into_iter().map(|((v, s), (y, m))| (v, s, y, m)).collect())
}

/// Continue training on 5-frame windows with masked segment labels, keeping
/// the parameters with the best holdout MAP. Evaluations happen every
/// `eval_every` steps and after the last step; the starting point is not a
/// candidate.
pub fn finetune(mut model: Model, cfg: &TrainConfig, train: SegmentSet<'_>, holdout: SegmentSet<'_>) -> Result<FinetuneResult> {
    cfg.validate()?;
    check_dims(&model, train.videos)?;
    check_dims(&model, holdout.videos)?;
    let classes = model.spec.classes();
    let examples = segment_examples(&train, classes)?;
    if examples.is_empty() {
        return Err(Error::invalid("no rated segments to fine-tune on"));
    }
    let truth = crate::data::ground_truth(holdout.labels);
    let eval_cfg = InferConfig { tta_min: 0, tta_max: 0, unit: 1, topk: cfg.k };
    let evaluate = |m: &Model| -> Result<f64> { infer(m, holdout.videos, holdout.labels, &eval_cfg)?.map_at_k(&truth, cfg.k) };

    let mut rng = SeededRng::new(cfg.seed).fork(0x4654);
    let mut opt = Adam::new(&model.params);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut evaluations = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut seen = 0;
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let (vi, start, y, m) = &examples[rng.below(examples.len())];
                Ok(Example {
                    frames: extract_segment(&train.videos[*vi], *start, 0, 1)?,
                    labels: y.clone(),
                    mask: Some(m.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lr = cfg.lr_at(seen);
        let loss = train_step(&mut model, &mut opt, &batch, lr)?;
        log.push(LogEntry { step, examples: seen, lr, loss });
        seen += batch.len();

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let map = evaluate(&model)?;
            evaluations.push((done, map));
            if best.as_ref().is_none_or(|(_, b, _)| map > *b) {
                best = Some((done, map, model.params.clone()));
            }
        }
    }
    let (best_step, best_map, params) = best.ok_or_else(|| Error::invalid("fine-tuning ran zero steps"))?;
    Ok(FinetuneResult {
        model: Model { spec: model.spec, params },
        log,
        evaluations,
        best_step,
        best_map,
    })
}

/// Index of the largest value, earliest on ties.
pub fn select_best(maps: &[f64]) -> Option<usize> {
    maps.iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &m)| match acc {
            Some((_, b)) if m <= b => acc,
            _ => Some((i, m)),
        })
        .map(|(i, _)| i)
}

/// Truth for a set of segment ratings.
pub fn truth_of(labels: &[SegmentLabel]) -> GroundTruth {
    crate::data::ground_truth(labels)
}
