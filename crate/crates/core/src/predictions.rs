//! Per-class ranked prediction tables and their text format.
//!
//! One line per prediction, `class_id<TAB>segment_id<TAB>score`, classes in
//! ascending order and each class in rank order. Scores are written with the
//! shortest representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{map_at_k, ClassRanking, GroundTruth};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionTable {
    classes: BTreeMap<u32, ClassRanking>,
}

impl PredictionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Group `(class, segment, score)` triples into rankings.
    pub fn from_triples<I, S>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, S, f64)>,
        S: Into<String>,
    {
        let mut by: BTreeMap<u32, Vec<(String, f64)>> = BTreeMap::new();
        for (c, s, score) in triples {
            by.entry(c).or_default().push((s.into(), score));
        }
        let mut t = Self::new();
        for (c, items) in by {
            t.insert(ClassRanking::new(c, items)?)?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, ranking: ClassRanking) -> Result<()> {
        let c = ranking.class();
        if self.classes.insert(c, ranking).is_some() {
            return Err(Error::invalid(format!("class {c} appears twice")));
        }
        Ok(())
    }

    pub fn get(&self, class: u32) -> Option<&ClassRanking> {
        self.classes.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn rankings(&self) -> impl Iterator<Item = &ClassRanking> {
        self.classes.values()
    }

    /// Total number of lines.
    pub fn len(&self) -> usize {
        self.classes.values().map(ClassRanking::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keep the best `k` segments of every class.
    pub fn truncate(&mut self, k: usize) {
        for r in self.classes.values_mut() {
            r.truncate(k);
        }
    }

    pub fn map_at_k(&self, truth: &GroundTruth, k: usize) -> Result<f64> {
        let rankings: Vec<ClassRanking> = self.classes.values().cloned().collect();
        map_at_k(&rankings, truth, k)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in self.classes.values() {
            for (s, score) in r.items() {
                // writing to a String cannot fail
                let _ = writeln!(out, "{}\t{}\t{}", r.class(), s, score);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut triples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format(format!("prediction line {}: {line:?}", n + 1));
            let mut parts = line.split('\t');
            let (Some(c), Some(s), Some(score), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let c: u32 = c.parse().map_err(|_| bad())?;
            let score: f64 = score.parse().map_err(|_| bad())?;
            if s.is_empty() || score.is_nan() {
                return Err(bad());
            }
            triples.push((c, s.to_string(), score));
        }
        Self::from_triples(triples).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Format(m),
            e => e,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
