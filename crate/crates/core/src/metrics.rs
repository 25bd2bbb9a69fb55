//! Mean average precision over per-class segment rankings.
//!
//! For a class with `N_c` positive segments and a ranking truncated at `K`,
//!
//! ```text
//! AP = (1 / N_c) · Σ_{k ≤ K} P(k) · rel(k),   P(k) = (# relevant in top k) / k
//! ```
//!
//! and MAP@K is the unweighted mean of AP over classes that have at least one
//! positive segment. Note the normalizer is `N_c`, not `min(N_c, K)`, so a
//! perfect ranking scores below one when `N_c > K`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Cutoff used by the original challenge.
pub const DEFAULT_K: usize = 100_000;

/// Descending-score order with ties broken by ascending segment id.
pub fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Segments ranked for one class, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRanking {
    class: u32,
    items: Vec<(String, f64)>,
}

impl ClassRanking {
    /// Sort `items` into rank order. Duplicate segment ids and NaN scores are rejected.
    pub fn new(class: u32, mut items: Vec<(String, f64)>) -> Result<Self> {
        if let Some((id, _)) = items.iter().find(|(_, s)| s.is_nan()) {
            return Err(Error::invalid(format!("NaN score for {id} in class {class}")));
        }
        items.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
        if let Some(w) = items.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid(format!(
                "segment {} ranked twice for class {class}",
                w[0].0
            )));
        }
        Ok(Self { class, items })
    }

    pub fn class(&self) -> u32 {
        self.class
    }

    pub fn items(&self) -> &[(String, f64)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(s, _)| s.as_str())
    }

    /// Keep only the best `k` entries.
    pub fn truncate(&mut self, k: usize) {
        self.items.truncate(k);
    }
}

/// Positive segment ids per class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    positives: BTreeMap<u32, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: u32, segment: impl Into<String>) {
        self.positives.entry(class).or_default().insert(segment.into());
    }

    /// Empty set for classes never seen.
    pub fn positives(&self, class: u32) -> &BTreeSet<String> {
        static EMPTY: BTreeSet<String> = BTreeSet::new();
        self.positives.get(&class).unwrap_or(&EMPTY)
    }

    pub fn count(&self, class: u32) -> usize {
        self.positives(class).len()
    }

    /// Classes with at least one positive segment, ascending.
    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.positives.iter().filter(|(_, s)| !s.is_empty()).map(|(&c, _)| c)
    }

    pub fn is_positive(&self, class: u32, segment: &str) -> bool {
        self.positives(class).contains(segment)
    }
}

/// AP from a relevance pattern in rank order. `None` when `positives == 0`.
pub fn ap_from_relevance(relevance: &[bool], positives: usize, k: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// AP@K of one class; `None` when the class has no positives.
pub fn average_precision_at_k(ranking: &ClassRanking, positives: &BTreeSet<String>, k: usize) -> Option<f64> {
    let rel: Vec<bool> = ranking.segment_ids().take(k).map(|s| positives.contains(s)).collect();
    ap_from_relevance(&rel, positives.len(), k)
}

/// Mean AP@K over classes with positives. Classes without a ranking score zero.
pub fn map_at_k(rankings: &[ClassRanking], truth: &GroundTruth, k: usize) -> Result<f64> {
    Ok(mean(&per_class_ap(rankings, truth, k)?))
}

/// `(class, AP)` for every class with positives, ascending by class.
pub fn per_class_ap(rankings: &[ClassRanking], truth: &GroundTruth, k: usize) -> Result<Vec<(u32, f64)>> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut by_class: BTreeMap<u32, &ClassRanking> = BTreeMap::new();
    for r in rankings {
        if by_class.insert(r.class(), r).is_some() {
            return Err(Error::invalid(format!("class {} ranked twice", r.class())));
        }
    }
    let classes: Vec<u32> = truth.classes().collect();
    Ok(classes
        .par_iter()
        .map(|&c| {
            let ap = match by_class.get(&c) {
                Some(r) => average_precision_at_k(r, truth.positives(c), k).unwrap_or(0.0),
                None => 0.0,
            };
            (c, ap)
        })
        .collect())
}

fn mean(aps: &[(u32, f64)]) -> f64 {
    if aps.is_empty() {
        return 0.0;
    }
    aps.iter().map(|(_, a)| a).sum::<f64>() / aps.len() as f64
}

/// Entry of the bounded heap; "greater" means ranked later (worse).
#[derive(Debug)]
struct Worst {
    score: f64,
    id: String,
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((&self.id, self.score), (&other.id, other.score))
    }
}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

/// Single-pass MAP@K: predictions arrive in any order and only the best `K`
/// per class are retained.
#[derive(Debug)]
pub struct StreamingMap {
    k: usize,
    heaps: BTreeMap<u32, BinaryHeap<Worst>>,
}

impl StreamingMap {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        Ok(Self { k, heaps: BTreeMap::new() })
    }

    pub fn push(&mut self, class: u32, segment: &str, score: f64) -> Result<()> {
        if score.is_nan() {
            return Err(Error::invalid(format!("NaN score for {segment}")));
        }
        let heap = self.heaps.entry(class).or_default();
        let item = Worst { score, id: segment.to_string() };
        if heap.len() < self.k {
            heap.push(item);
        } else if let Some(mut top) = heap.peek_mut() {
            if item < *top {
                *top = item;
            }
        }
        Ok(())
    }

    pub fn finish(mut self, truth: &GroundTruth) -> f64 {
        let aps: Vec<(u32, f64)> = truth
            .classes()
            .map(|c| {
                let positives = truth.positives(c);
                let rel: Vec<bool> = self
                    .heaps
                    .remove(&c)
                    .map(|h| h.into_sorted_vec())
                    .unwrap_or_default()
                    .iter()
                    .map(|w| positives.contains(&w.id))
                    .collect();
                (c, ap_from_relevance(&rel, positives.len(), self.k).unwrap_or(0.0))
            })
            .collect();
        mean(&aps)
    }
}
