//! Dataset manifests (flat `key=value` text) and the datasets they describe.
//!
//! ```text
//! visual_dim=32
//! audio_dim=8
//! classes=20
//! seed=42
//! features.pretrain=pretrain.fvc
//! segments.holdout=holdout.seg
//! ```
//!
//! File lists are comma separated; relative paths resolve against the
//! manifest's directory. Lines starting with `#` are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{read_features, read_segment_labels, FrameSequence, SegmentLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Pretrain,
    Finetune,
    Holdout,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Finetune, Split::Holdout, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Holdout => "holdout",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub features: BTreeMap<Split, Vec<PathBuf>>,
    pub segments: BTreeMap<Split, Vec<PathBuf>>,
    /// Directory relative paths are resolved against.
    pub base: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut dims: BTreeMap<&str, &str> = BTreeMap::new();
        let mut features = BTreeMap::new();
        let mut segments = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| Error::format(format!("manifest line {}: {why}: {line:?}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            let files = || -> Vec<PathBuf> {
                value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
            };
            let target = match key.split_once('.') {
                Some(("features", split)) => Some((&mut features, split)),
                Some(("segments", split)) => Some((&mut segments, split)),
                _ => None,
            };
            match target {
                Some((map, split)) => {
                    let split: Split = split.parse().map_err(|_| bad("unknown split"))?;
                    if map.insert(split, files()).is_some() {
                        return Err(bad("duplicate key"));
                    }
                }
                None => {
                    if !matches!(key, "visual_dim" | "audio_dim" | "classes" | "seed") {
                        return Err(bad("unknown key"));
                    }
                    if dims.insert(key, value).is_some() {
                        return Err(bad("duplicate key"));
                    }
                }
            }
        }
        let num = |key: &str| -> Result<u64> {
            let v = dims
                .get(key)
                .ok_or_else(|| Error::format(format!("manifest is missing {key}")))?;
            v.parse()
                .map_err(|_| Error::format(format!("manifest {key} is not a number: {v}")))
        };
        let m = Manifest {
            visual_dim: num("visual_dim")? as usize,
            audio_dim: num("audio_dim")? as usize,
            classes: num("classes")? as usize,
            seed: if dims.contains_key("seed") { num("seed")? } else { 0 },
            features,
            segments,
            base: base.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_dim == 0 || self.classes == 0 || self.classes > usize::from(u16::MAX) + 1 {
            return Err(Error::format(format!(
                "manifest dimensions out of range (visual {}, classes {})",
                self.visual_dim, self.classes
            )));
        }
        let mut seen: HashMap<&Path, Split> = HashMap::new();
        for (split, files) in self.features.iter().chain(&self.segments) {
            for f in files {
                if let Some(other) = seen.insert(f.as_path(), *split) {
                    if other != *split {
                        return Err(Error::format(format!(
                            "{} is listed in both {other} and {split}",
                            f.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "visual_dim={}", self.visual_dim);
        let _ = writeln!(out, "audio_dim={}", self.audio_dim);
        let _ = writeln!(out, "classes={}", self.classes);
        let _ = writeln!(out, "seed={}", self.seed);
        for (kind, map) in [("features", &self.features), ("segments", &self.segments)] {
            for (split, files) in map {
                let joined: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
                let _ = writeln!(out, "{kind}.{split}={}", joined.join(","));
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&fs::read_to_string(path)?, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.visual_dim + self.audio_dim
    }
}

/// Everything a manifest points at, loaded and cross-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub videos: BTreeMap<Split, Vec<FrameSequence>>,
    pub segments: BTreeMap<Split, Vec<SegmentLabel>>,
}

impl Dataset {
    pub fn load(manifest: Manifest) -> Result<Self> {
        let mut videos = BTreeMap::new();
        for (&split, files) in &manifest.features {
            let mut all = Vec::new();
            for f in files {
                all.extend(read_features(manifest.resolve(f))?);
            }
            videos.insert(split, all);
        }
        let mut segments = BTreeMap::new();
        for (&split, files) in &manifest.segments {
            let mut all = Vec::new();
            for f in files {
                all.extend(read_segment_labels(manifest.resolve(f))?);
            }
            segments.insert(split, all);
        }
        Self::from_parts(manifest, videos, segments)
    }

    pub fn from_parts(
        manifest: Manifest,
        videos: BTreeMap<Split, Vec<FrameSequence>>,
        segments: BTreeMap<Split, Vec<SegmentLabel>>,
    ) -> Result<Self> {
        let mut ids: HashMap<&str, Split> = HashMap::new();
        for (&split, seqs) in &videos {
            for s in seqs {
                if s.visual_dim() != manifest.visual_dim || s.audio_dim() != manifest.audio_dim {
                    return Err(Error::format(format!(
                        "{}: feature dims {}+{} do not match manifest {}+{}",
                        s.id,
                        s.visual_dim(),
                        s.audio_dim(),
                        manifest.visual_dim,
                        manifest.audio_dim
                    )));
                }
                if let Some(&c) = s.labels.iter().find(|&&c| usize::from(c) >= manifest.classes) {
                    return Err(Error::format(format!("{}: class {c} out of range", s.id)));
                }
                if ids.insert(&s.id, split).is_some() {
                    return Err(Error::format(format!("video {} appears more than once", s.id)));
                }
            }
        }
        for (&split, labels) in &segments {
            let frames: HashMap<&str, usize> = videos
                .get(&split)
                .map(|v| v.iter().map(|s| (s.id.as_str(), s.frames())).collect())
                .unwrap_or_default();
            let mut seen = HashSet::new();
            for l in labels {
                let n = frames.get(l.video.as_str()).ok_or_else(|| {
                    Error::format(format!("segment label for unknown {split} video {}", l.video))
                })?;
                if !l.fits(*n) {
                    return Err(Error::format(format!(
                        "segment {} runs past the end of a {n}-frame video",
                        l.segment_id()
                    )));
                }
                if usize::from(l.class) >= manifest.classes {
                    return Err(Error::format(format!("segment {}: class {} out of range", l.segment_id(), l.class)));
                }
                if !seen.insert((l.video.as_str(), l.start, l.class)) {
                    return Err(Error::format(format!(
                        "segment {} is rated twice for class {}",
                        l.segment_id(),
                        l.class
                    )));
                }
            }
        }
        Ok(Self { manifest, videos, segments })
    }

    pub fn videos(&self, split: Split) -> &[FrameSequence] {
        self.videos.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn segments(&self, split: Split) -> &[SegmentLabel] {
        self.segments.get(&split).map_or(&[], Vec::as_slice)
    }

    /// Videos of `split` by id.
    pub fn index(&self, split: Split) -> HashMap<&str, &FrameSequence> {
        self.videos(split).iter().map(|s| (s.id.as_str(), s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "# toy\nvisual_dim=4\naudio_dim=2\nclasses=3\nseed=9\n\
                        features.pretrain=a.fvc, b.fvc\nfeatures.test=t.fvc\nsegments.test=t.seg\n";

    #[test]
    fn parse_and_print() {
        let m = Manifest::parse(TEXT, "/data").unwrap();
        assert_eq!((m.visual_dim, m.audio_dim, m.classes, m.seed), (4, 2, 3, 9));
        assert_eq!(m.features[&Split::Pretrain], vec![PathBuf::from("a.fvc"), PathBuf::from("b.fvc")]);
        assert_eq!(m.resolve(Path::new("t.seg")), PathBuf::from("/data/t.seg"));
        let again = Manifest::parse(&m.to_text(), "/data").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_bad_manifests() {
        for bad in [
            "visual_dim=4\naudio_dim=2\n",
            "visual_dim=4\naudio_dim=2\nclasses=x\n",
            "visual_dim=4\naudio_dim=2\nclasses=3\ncolour=red\n",
            "visual_dim=4\naudio_dim=2\nclasses=3\nfeatures.dev=a\n",
            "visual_dim=4\naudio_dim=2\nclasses=3\nfeatures.test=a\nfeatures.holdout=a\n",
            "visual_dim=4\naudio_dim=2\nclasses=3\nclasses=4\n",
            "visual_dim\n",
        ] {
            assert!(matches!(Manifest::parse(bad, "."), Err(Error::Format(_))), "{bad}");
        }
    }

    #[test]
    fn split_names() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
    }
}
