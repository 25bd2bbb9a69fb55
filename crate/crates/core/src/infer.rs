//! Segment inference with test-time augmentation.
//!
//! Every rated location `(video, start)` is scored once per shift
//! `i ∈ [tta_min, tta_max]` on the window starting at `start + i·unit`
//! (clamped into the video), and the per-class probabilities are averaged.
//! Locations are scored in parallel and merged back in sorted order, so the
//! output does not depend on the thread count.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;

use crate::data::{extract_segment, segment_id, FrameSequence, SegmentLabel};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_K;
use crate::model::Model;
use crate::predictions::PredictionTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferConfig {
    pub tta_min: i64,
    pub tta_max: i64,
    /// Frames per shift step.
    pub unit: usize,
    /// Segments kept per class.
    pub topk: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { tta_min: 0, tta_max: 0, unit: 1, topk: DEFAULT_K }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tta_min > self.tta_max {
            return Err(Error::invalid(format!(
                "empty shift range [{}, {}]",
                self.tta_min, self.tta_max
            )));
        }
        if self.topk == 0 {
            return Err(Error::invalid("top-K must be at least 1"));
        }
        Ok(())
    }
}

/// Averaged class probabilities for each distinct rated location, sorted by `(video, start)`.
pub fn segment_scores(
    model: &Model,
    videos: &[FrameSequence],
    labels: &[SegmentLabel],
    cfg: &InferConfig,
) -> Result<Vec<(String, Vec<f64>)>> {
    cfg.validate()?;
    let index: HashMap<&str, &FrameSequence> = videos.iter().map(|v| (v.id.as_str(), v)).collect();
    let locations: BTreeSet<(&str, usize)> = labels.iter().map(|l| (l.video.as_str(), l.start)).collect();
    let locations: Vec<(&str, usize)> = locations.into_iter().collect();
    let shifts: Vec<i64> = (cfg.tta_min..=cfg.tta_max).collect();
    locations
        .par_iter()
        .map(|&(vid, start)| {
            let seq = index
                .get(vid)
                .ok_or_else(|| Error::invalid(format!("rating for unknown video {vid}")))?;
            let mut acc = vec![0.0; model.spec.classes()];
            for &shift in &shifts {
                let window = extract_segment(seq, start, shift, cfg.unit)?;
                for (a, p) in acc.iter_mut().zip(model.predict(&window)?) {
                    *a += p;
                }
            }
            let n = shifts.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok((segment_id(vid, start), acc))
        })
        .collect()
}

/// Score every rated location for every class and keep the top K per class.
pub fn infer(model: &Model, videos: &[FrameSequence], labels: &[SegmentLabel], cfg: &InferConfig) -> Result<PredictionTable> {
    let scores = segment_scores(model, videos, labels, cfg)?;
    let mut table = scores_to_table(&scores)?;
    table.truncate(cfg.topk);
    Ok(table)
}

/// One ranking per class over all scored segments.
pub fn scores_to_table(scores: &[(String, Vec<f64>)]) -> Result<PredictionTable> {
    let triples = scores
        .iter()
        .flat_map(|(id, probs)| probs.iter().enumerate().map(move |(c, &p)| (c as u32, id.clone(), p)));
    PredictionTable::from_triples(triples)
}
