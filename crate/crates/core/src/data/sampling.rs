//! Frame sampling for training and shifted segment windows for inference.

use std::fmt;
use std::str::FromStr;

use super::{FrameSequence, SEGMENT_LEN};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// `N` independent uniform frame draws, kept in temporal order.
    WithReplacement,
    /// `N` distinct frames in temporal order; falls back to drawing with
    /// replacement when the video is shorter than `N`.
    Subsequence,
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleMode::WithReplacement => "with_replacement",
            SampleMode::Subsequence => "subsequence",
        })
    }
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_replacement" | "replacement" => Ok(SampleMode::WithReplacement),
            "subsequence" => Ok(SampleMode::Subsequence),
            other => Err(Error::invalid(format!("unknown sampling mode {other}"))),
        }
    }
}

/// Frame indices chosen by [`sample_frames`].
pub fn sample_indices(frames: usize, n: usize, mode: SampleMode, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if frames == 0 || n == 0 {
        return Err(Error::invalid(format!("cannot sample {n} of {frames} frames")));
    }
    let mut idx = match mode {
        SampleMode::Subsequence if n <= frames => {
            let mut all: Vec<usize> = (0..frames).collect();
            // partial Fisher-Yates: the first n slots are a uniform n-subset
            for i in 0..n {
                let j = i + rng.below(frames - i);
                all.swap(i, j);
            }
            all.truncate(n);
            all
        }
        _ => (0..n).map(|_| rng.below(frames)).collect(),
    };
    idx.sort_unstable();
    Ok(idx)
}

/// `N x (D_v + D_a)` rows drawn from the video.
pub fn sample_frames(seq: &FrameSequence, n: usize, mode: SampleMode, rng: &mut SeededRng) -> Result<Tensor> {
    let idx = sample_indices(seq.frames(), n, mode, rng)?;
    Ok(seq.combined().gather_rows(&idx))
}

/// First frame of the window for `start` moved by `shift` units, clamped into the video.
pub fn shifted_start(frames: usize, start: usize, shift: i64, unit: usize) -> Result<usize> {
    if start + SEGMENT_LEN > frames {
        return Err(Error::invalid(format!(
            "segment at {start} does not fit in {frames} frames"
        )));
    }
    let last = (frames - SEGMENT_LEN) as i64;
    Ok((start as i64 + shift * unit as i64).clamp(0, last) as usize)
}

/// The `SEGMENT_LEN x (D_v + D_a)` window starting at `start + shift·unit`, clamped.
pub fn extract_segment(seq: &FrameSequence, start: usize, shift: i64, unit: usize) -> Result<Tensor> {
    let s = shifted_start(seq.frames(), start, shift, unit)?;
    Ok(seq.combined().slice_rows(s, s + SEGMENT_LEN))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(frames: usize) -> FrameSequence {
        let v = Tensor::matrix(frames, 2, (0..frames * 2).map(|i| i as f64).collect());
        let a = Tensor::matrix(frames, 1, (0..frames).map(|i| -(i as f64)).collect());
        FrameSequence::new("v", v, a, vec![0]).unwrap()
    }

    #[test]
    fn full_subsequence_keeps_order() {
        let seq = video(7);
        let out = sample_frames(&seq, 7, SampleMode::Subsequence, &mut SeededRng::new(1)).unwrap();
        assert_eq!(out, seq.combined());
    }

    #[test]
    fn lengths_and_determinism() {
        let seq = video(4);
        for mode in [SampleMode::WithReplacement, SampleMode::Subsequence] {
            for n in [1, 3, 4, 9] {
                let a = sample_frames(&seq, n, mode, &mut SeededRng::new(5)).unwrap();
                let b = sample_frames(&seq, n, mode, &mut SeededRng::new(5)).unwrap();
                assert_eq!(a.dims2(), (n, 3));
                assert_eq!(a, b);
            }
        }
        assert!(sample_frames(&seq, 0, SampleMode::Subsequence, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn subsequence_indices_are_distinct_and_sorted() {
        let mut rng = SeededRng::new(2);
        for _ in 0..50 {
            let idx = sample_indices(20, 8, SampleMode::Subsequence, &mut rng).unwrap();
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn segment_windows() {
        let seq = video(12);
        let all = seq.combined();
        assert_eq!(extract_segment(&seq, 3, 0, 1).unwrap(), all.slice_rows(3, 8));
        assert_eq!(extract_segment(&seq, 0, -1, 1).unwrap(), all.slice_rows(0, 5));
        assert_eq!(extract_segment(&seq, 5, 1, 1).unwrap(), all.slice_rows(6, 11));
        assert_eq!(extract_segment(&seq, 7, 1, 1).unwrap(), all.slice_rows(7, 12));
        assert_eq!(extract_segment(&seq, 5, -1, 5).unwrap(), all.slice_rows(0, 5));
        assert!(extract_segment(&seq, 8, 0, 1).is_err());
    }

    #[test]
    fn mode_names() {
        for m in [SampleMode::WithReplacement, SampleMode::Subsequence] {
            assert_eq!(m.to_string().parse::<SampleMode>().unwrap(), m);
        }
    }
}
