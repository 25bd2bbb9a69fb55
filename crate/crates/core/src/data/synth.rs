//! Synthetic frame-feature datasets with known segment ground truth.
//!
//! Every class has a Gaussian prototype in the visual and audio spaces. A
//! video carries a random background vector and one to three labeled spans;
//! frames inside a span add a noisy, randomly scaled copy of the class
//! prototype. Video-level labels are the classes of the spans. Videos outside
//! the pretraining split also get segment ratings: for each class some windows
//! are picked inside its span and some outside, and every picked window is
//! rated for all of the video's classes (positive when most of its frames lie
//! in the class's span). Spans are longer than a rated window, so the frames
//! around a positive window still carry its class.

use std::collections::BTreeMap;
use std::path::Path;

use super::{
    encode_features, format_segment_labels, FrameSequence, Manifest, SegmentLabel, Split, Dataset, SEGMENT_LEN,
};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub videos: usize,
    pub frames: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub seed: u64,
    pub max_labels: usize,
    pub span_min: usize,
    pub span_max: usize,
    /// Scale of the class prototype inside a span.
    pub signal: f64,
    /// Standard deviation of the per-video background.
    pub background: f64,
    /// Standard deviation of per-frame noise.
    pub noise: f64,
    pub positives_per_label: usize,
    pub negatives_per_label: usize,
    /// Frames kept between a rated window and the edge of its class's span:
    /// positives sit this far inside when the span allows, negatives at
    /// least this far outside.
    pub margin: usize,
    /// Fractions of videos in pretrain, finetune and holdout; test gets the rest.
    pub fractions: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            videos: 500,
            frames: 30,
            visual_dim: 32,
            audio_dim: 8,
            seed: 42,
            max_labels: 3,
            span_min: 7,
            span_max: 10,
            signal: 1.0,
            background: 1.0,
            noise: 1.0,
            positives_per_label: 2,
            negatives_per_label: 2,
            margin: 1,
            fractions: [0.5, 0.2, 0.15],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::invalid(format!("synthetic config: {why}")));
        if self.classes == 0 || self.classes > usize::from(u16::MAX) + 1 {
            return bad("class count out of range");
        }
        if self.visual_dim == 0 {
            return bad("visual features need at least one dimension");
        }
        if self.span_min < SEGMENT_LEN || self.span_max < self.span_min {
            return bad("spans must be at least one segment long");
        }
        if self.max_labels == 0 || self.max_labels * self.span_max > self.frames {
            return bad("videos are too short for their spans");
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || self.fractions.iter().sum::<f64>() > 1.0 {
            return bad("split fractions must lie in [0, 1] and sum to at most 1");
        }
        Ok(())
    }

    fn split_of(&self, index: usize) -> Split {
        let mut bound = 0.0;
        for (split, frac) in [Split::Pretrain, Split::Finetune, Split::Holdout].into_iter().zip(self.fractions) {
            bound += frac * self.videos as f64;
            if (index as f64) < bound.round() {
                return split;
            }
        }
        Split::Test
    }
}

/// Where a class occurs inside a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub class: u16,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// `C x D_v`.
    pub visual_prototypes: Tensor,
    /// `C x D_a`.
    pub audio_prototypes: Tensor,
    pub videos: BTreeMap<Split, Vec<FrameSequence>>,
    pub segments: BTreeMap<Split, Vec<SegmentLabel>>,
    pub spans: BTreeMap<String, Vec<Span>>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut root = SeededRng::new(cfg.seed);
    let mut proto_rng = root.fork(1);
    let mut video_rng = root.fork(2);
    let round = |v: f64| f64::from(v as f32);
    let visual_prototypes = gaussian(cfg.classes, cfg.visual_dim, 1.0, &mut proto_rng);
    let audio_prototypes = gaussian(cfg.classes, cfg.audio_dim, 1.0, &mut proto_rng);

    let mut videos: BTreeMap<Split, Vec<FrameSequence>> = BTreeMap::new();
    let mut segments: BTreeMap<Split, Vec<SegmentLabel>> = BTreeMap::new();
    let mut all_spans = BTreeMap::new();
    for index in 0..cfg.videos {
        let mut rng = video_rng.fork(index as u64);
        let id = format!("vid{index:05}");
        let spans = place_spans(cfg, &mut rng);

        let bg_v = gaussian(1, cfg.visual_dim, cfg.background, &mut rng);
        let bg_a = gaussian(1, cfg.audio_dim, cfg.background, &mut rng);
        let mut visual = Tensor::zeros(cfg.frames, cfg.visual_dim);
        let mut audio = Tensor::zeros(cfg.frames, cfg.audio_dim);
        for t in 0..cfg.frames {
            let active: Vec<(usize, f64)> = spans
                .iter()
                .filter(|s| (s.start..s.end).contains(&t))
                .map(|s| (usize::from(s.class), cfg.signal * rng.uniform(0.5, 1.5)))
                .collect();
            for (out, bg, protos) in [
                (&mut visual, &bg_v, &visual_prototypes),
                (&mut audio, &bg_a, &audio_prototypes),
            ] {
                for d in 0..out.cols() {
                    let mut v = bg.at(0, d) + cfg.noise * rng.normal();
                    for &(c, amp) in &active {
                        v += amp * protos.at(c, d);
                    }
                    out.set(t, d, round(v));
                }
            }
        }
        let labels = spans.iter().map(|s| s.class).collect();
        let split = cfg.split_of(index);
        if split != Split::Pretrain {
            segments.entry(split).or_default().extend(rate_segments(cfg, &id, &spans, &mut rng));
        }
        videos
            .entry(split)
            .or_default()
            .push(FrameSequence::new(id.clone(), visual, audio, labels)?);
        all_spans.insert(id, spans);
    }
    Ok(SynthDataset {
        config: *cfg,
        visual_prototypes,
        audio_prototypes,
        videos,
        segments,
        spans: all_spans,
    })
}

fn gaussian(rows: usize, cols: usize, sd: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| sd * rng.normal()).collect())
}

/// Non-overlapping spans for 1..=max_labels distinct classes, sorted by start.
fn place_spans(cfg: &SynthConfig, rng: &mut SeededRng) -> Vec<Span> {
    let n = 1 + rng.below(cfg.max_labels.min(cfg.classes));
    let mut classes: Vec<u16> = (0..cfg.classes).map(|c| c as u16).collect();
    rng.shuffle(&mut classes);
    let lens: Vec<usize> = (0..n).map(|_| cfg.span_min + rng.below(cfg.span_max - cfg.span_min + 1)).collect();
    // distribute the free frames into n + 1 random gaps
    let free = cfg.frames - lens.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.below(free + 1)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, &len) in lens.iter().enumerate() {
        cursor += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        spans.push(Span { class: classes[i], start: cursor, end: cursor + len });
        cursor += len;
    }
    spans
}

/// Number of frames of the window at `start` that fall inside `span`.
pub fn span_overlap(span: &Span, start: usize) -> usize {
    let end = start + SEGMENT_LEN;
    end.min(span.end).saturating_sub(start.max(span.start))
}

/// Pick windows per class (positives inside its span, negatives outside),
/// then rate every picked window for every class of the video: positive
/// when most of its frames lie in that class's span.
fn rate_segments(cfg: &SynthConfig, id: &str, spans: &[Span], rng: &mut SeededRng) -> Vec<SegmentLabel> {
    let mut starts = std::collections::BTreeSet::new();
    let m = cfg.margin;
    for span in spans {
        let mut inside: Vec<usize> = if span.end - span.start >= SEGMENT_LEN + 2 * m {
            (span.start + m..=span.end - SEGMENT_LEN - m).collect()
        } else {
            (span.start..=span.end - SEGMENT_LEN).collect()
        };
        let mut outside: Vec<usize> = (0..=cfg.frames - SEGMENT_LEN)
            .filter(|&s| s + SEGMENT_LEN + m <= span.start || s >= span.end + m)
            .collect();
        rng.shuffle(&mut inside);
        rng.shuffle(&mut outside);
        starts.extend(inside.into_iter().take(cfg.positives_per_label));
        starts.extend(outside.into_iter().take(cfg.negatives_per_label));
    }
    let mut out = Vec::new();
    for start in starts {
        for span in spans {
            out.push(SegmentLabel {
                video: id.to_string(),
                start,
                class: span.class,
                positive: 2 * span_overlap(span, start) > SEGMENT_LEN,
            });
        }
    }
    out
}

impl SynthDataset {
    pub fn manifest(&self, base: impl Into<std::path::PathBuf>) -> Manifest {
        let mut features = BTreeMap::new();
        let mut segments = BTreeMap::new();
        for split in Split::ALL {
            features.insert(split, vec![format!("{split}.fvc").into()]);
            if split != Split::Pretrain {
                segments.insert(split, vec![format!("{split}.seg").into()]);
            }
        }
        Manifest {
            visual_dim: self.config.visual_dim,
            audio_dim: self.config.audio_dim,
            classes: self.config.classes,
            seed: self.config.seed,
            features,
            segments,
            base: base.into(),
        }
    }

    /// Write feature, segment and manifest files into `dir`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = self.manifest(dir);
        for split in Split::ALL {
            let videos = self.videos.get(&split).map_or(&[][..], Vec::as_slice);
            std::fs::write(dir.join(format!("{split}.fvc")), encode_features(videos)?)?;
            if split != Split::Pretrain {
                let segs = self.segments.get(&split).map_or(&[][..], Vec::as_slice);
                std::fs::write(dir.join(format!("{split}.seg")), format_segment_labels(segs))?;
            }
        }
        let path = dir.join("manifest.txt");
        manifest.save(&path)?;
        Ok(path)
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::from_parts(self.manifest("."), self.videos.clone(), self.segments.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { classes: 5, videos: 40, seed: 3, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.videos, c.videos);
    }

    #[test]
    fn segments_fit_and_match_spans() {
        let d = synth_generate(&small()).unwrap();
        let cfg = d.config;
        for (split, labels) in &d.segments {
            assert_ne!(*split, Split::Pretrain);
            for l in labels {
                assert!(l.start + SEGMENT_LEN <= cfg.frames);
                let span = d.spans[&l.video].iter().find(|s| s.class == l.class).unwrap();
                let frames_in = (l.start..l.start + SEGMENT_LEN).filter(|t| (span.start..span.end).contains(t)).count();
                assert_eq!(l.positive, frames_in >= 3);
            }
            // every rated window is rated for all of its video's classes
            let mut per_window: BTreeMap<(&str, usize), usize> = BTreeMap::new();
            for l in labels {
                *per_window.entry((l.video.as_str(), l.start)).or_default() += 1;
            }
            for ((v, _), n) in per_window {
                assert_eq!(n, d.spans[v].len());
            }
        }
        assert!(d.to_dataset().is_ok());
    }

    #[test]
    fn labels_are_span_classes() {
        let d = synth_generate(&small()).unwrap();
        for seqs in d.videos.values() {
            for s in seqs {
                let mut want: Vec<u16> = d.spans[&s.id].iter().map(|sp| sp.class).collect();
                want.sort_unstable();
                assert_eq!(s.labels, want);
                assert!(!want.is_empty() && want.len() <= 3);
                let spans = &d.spans[&s.id];
                assert!(spans.windows(2).all(|w| w[0].end <= w[1].start));
                assert!(spans.last().unwrap().end <= d.config.frames);
            }
        }
    }

    #[test]
    fn values_are_f32_exact() {
        let d = synth_generate(&small()).unwrap();
        let s = &d.videos[&Split::Test][0];
        assert!(s.visual.data().iter().all(|&v| f64::from(v as f32) == v));
    }

    #[test]
    fn split_sizes() {
        let d = synth_generate(&SynthConfig { videos: 100, ..small() }).unwrap();
        let n: Vec<usize> = Split::ALL.iter().map(|s| d.videos[s].len()).collect();
        assert_eq!(n, vec![50, 20, 15, 15]);
    }

    #[test]
    fn rejects_impossible_configs() {
        assert!(synth_generate(&SynthConfig { frames: 20, ..small() }).is_err());
        assert!(synth_generate(&SynthConfig { span_min: 4, ..small() }).is_err());
        assert!(synth_generate(&SynthConfig { fractions: [0.6, 0.3, 0.3], ..small() }).is_err());
    }
}
