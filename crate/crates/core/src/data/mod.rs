//! Frame features, segment labels, manifests, synthetic data and the frame
//! sampling used for training and test-time augmentation.

mod features;
mod labels;
mod manifest;
mod sampling;
mod synth;

pub use features::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use labels::{
    format_segment_labels, ground_truth, parse_segment_labels, read_segment_labels, segment_id, write_segment_labels,
    SegmentLabel, SEGMENT_LEN,
};
pub use manifest::{Dataset, Manifest, Split};
pub use sampling::{extract_segment, sample_frames, sample_indices, shifted_start, SampleMode};
pub use synth::{span_overlap, synth_generate, Span, SynthConfig, SynthDataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One video's frame-level features and video-level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub id: String,
    /// `I x D_v`.
    pub visual: Tensor,
    /// `I x D_a`.
    pub audio: Tensor,
    /// Ascending, without duplicates.
    pub labels: Vec<u16>,
}

impl FrameSequence {
    pub fn new(id: impl Into<String>, visual: Tensor, audio: Tensor, mut labels: Vec<u16>) -> Result<Self> {
        let id = id.into();
        if visual.rank() != 2 || audio.rank() != 2 {
            return Err(Error::shape(format!("{id}: features must be matrices")));
        }
        if visual.rows() != audio.rows() {
            return Err(Error::shape(format!(
                "{id}: {} visual frames but {} audio frames",
                visual.rows(),
                audio.rows()
            )));
        }
        if visual.rows() == 0 {
            return Err(Error::invalid(format!("{id}: video has no frames")));
        }
        labels.sort_unstable();
        labels.dedup();
        Ok(Self { id, visual, audio, labels })
    }

    pub fn frames(&self) -> usize {
        self.visual.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.cols()
    }

    /// `I x (D_v + D_a)`, visual columns first.
    pub fn combined(&self) -> Tensor {
        Tensor::concat_cols(&[&self.visual, &self.audio]).expect("row counts checked at construction")
    }

    /// Multi-hot video-level label row over `classes`.
    pub fn label_row(&self, classes: usize) -> Tensor {
        let mut t = Tensor::zeros(1, classes);
        for &c in &self.labels {
            if (c as usize) < classes {
                t.set(0, c as usize, 1.0);
            }
        }
        t
    }
}
