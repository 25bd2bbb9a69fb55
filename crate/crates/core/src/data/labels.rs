//! Segment-level labels: `video_id<TAB>start<TAB>class<TAB>{0,1}` per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::GroundTruth;

/// Frames per labeled segment.
pub const SEGMENT_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentLabel {
    pub video: String,
    pub start: usize,
    pub class: u16,
    pub positive: bool,
}

impl SegmentLabel {
    /// `"videoid:startframe"`, the id used in prediction files.
    pub fn segment_id(&self) -> String {
        segment_id(&self.video, self.start)
    }

    /// Whether the segment lies inside a video of `frames` frames.
    pub fn fits(&self, frames: usize) -> bool {
        self.start + SEGMENT_LEN <= frames
    }
}

pub fn segment_id(video: &str, start: usize) -> String {
    format!("{video}:{start}")
}

pub fn parse_segment_labels(text: &str) -> Result<Vec<SegmentLabel>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(format!("segment label line {}: {line:?}", n + 1));
        let parts: Vec<&str> = line.split('\t').collect();
        let [video, start, class, verdict] = parts[..] else {
            return Err(bad());
        };
        if video.is_empty() || video.contains(':') {
            return Err(bad());
        }
        let positive = match verdict {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        out.push(SegmentLabel {
            video: video.to_string(),
            start: start.parse().map_err(|_| bad())?,
            class: class.parse().map_err(|_| bad())?,
            positive,
        });
    }
    Ok(out)
}

pub fn format_segment_labels(labels: &[SegmentLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", l.video, l.start, l.class, u8::from(l.positive));
    }
    out
}

pub fn read_segment_labels(path: impl AsRef<Path>) -> Result<Vec<SegmentLabel>> {
    parse_segment_labels(&fs::read_to_string(path)?)
}

pub fn write_segment_labels(labels: &[SegmentLabel], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_segment_labels(labels))?;
    Ok(())
}

/// Positive segment ids per class.
pub fn ground_truth(labels: &[SegmentLabel]) -> GroundTruth {
    let mut t = GroundTruth::new();
    for l in labels.iter().filter(|l| l.positive) {
        t.add(u32::from(l.class), l.segment_id());
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let labels = vec![
            SegmentLabel { video: "v1".into(), start: 0, class: 3, positive: true },
            SegmentLabel { video: "v1".into(), start: 10, class: 3, positive: false },
        ];
        let text = format_segment_labels(&labels);
        assert_eq!(text, "v1\t0\t3\t1\nv1\t10\t3\t0\n");
        assert_eq!(parse_segment_labels(&text).unwrap(), labels);
        assert_eq!(labels[1].segment_id(), "v1:10");
    }

    #[test]
    fn malformed_lines_are_rejected() {
        for bad in ["v1\t0\t3", "v1\t0\t3\t2", "v1\t-1\t3\t1", "v:1\t0\t3\t1", "v1\t0\tx\t1"] {
            assert!(matches!(parse_segment_labels(bad), Err(Error::Format(_))), "{bad}");
        }
    }

    #[test]
    fn truth_keeps_positives_only() {
        let labels = parse_segment_labels("a\t0\t1\t1\na\t5\t1\t0\nb\t2\t0\t1\n").unwrap();
        let t = ground_truth(&labels);
        assert!(t.is_positive(1, "a:0"));
        assert!(!t.is_positive(1, "a:5"));
        assert_eq!(t.classes().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn segment_bounds() {
        let l = SegmentLabel { video: "a".into(), start: 25, class: 0, positive: true };
        assert!(l.fits(30));
        assert!(!l.fits(29));
    }
}
