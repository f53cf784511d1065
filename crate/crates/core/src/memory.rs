//! Fixed-capacity episodic memory over embeddings.
//!
//! Each entry carries the label plus the logits, loss and predictive
//! uncertainty last computed for it. Those scores drive both the replacement
//! policy (which entry to evict) and the replay selection strategy (which
//! entries to rehearse). Entries are kept in insertion order: an eviction
//! removes the victim and appends the newcomer at the end, so a lower index
//! always means an older entry.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp on stored losses before taking `1 / loss`.
pub const MIN_LOSS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub z: Vec<f64>,
    pub y: usize,
    pub h: Vec<f64>,
    pub loss: f64,
    pub uncertainty: f64,
}

impl MemoryEntry {
    fn validate(&self) -> Result<()> {
        if !(self.loss >= 0.0 && self.loss.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "memory entry loss must be finite and >= 0, got {}",
                self.loss
            )));
        }
        if !(self.uncertainty >= 0.0 && self.uncertainty.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "memory entry uncertainty must be finite and >= 0, got {}",
                self.uncertainty
            )));
        }
        if self.h.iter().chain(&self.z).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("memory entry"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementPolicy {
    /// Evict from the majority class, favouring low-loss entries.
    Lawcbr,
    /// Reservoir admission, then evict by `class count / loss`.
    Lawrrr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Uniform,
    /// Half highest-uncertainty, half lowest-uncertainty entries.
    Uapn,
    /// Half highest-loss, half lowest-loss entries.
    Lapn,
}

/// Outcome of [`ReplayBuffer::insert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Insertion {
    pub stored: bool,
    /// Index (before removal) of the evicted entry, if any.
    pub victim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<MemoryEntry>,
    seen_count: u64,
    class_counts: BTreeMap<usize, usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter(
                "replay buffer capacity must be >= 1".into(),
            ));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen_count: 0,
            class_counts: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&MemoryEntry> {
        self.entries.get(index)
    }

    pub fn class_counts(&self) -> &BTreeMap<usize, usize> {
        &self.class_counts
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.class_counts.get(&class).copied().unwrap_or(0)
    }

    /// Recounts labels and compares against the maintained counters.
    pub fn check_invariants(&self) -> bool {
        let mut recount = BTreeMap::new();
        for e in &self.entries {
            *recount.entry(e.y).or_insert(0usize) += 1;
        }
        self.entries.len() <= self.capacity
            && recount == self.class_counts
            && self.seen_count >= self.entries.len() as u64
    }

    /// Offers `entry` to the buffer.
    ///
    /// Below capacity the entry is appended. At capacity, LAWCBR always admits
    /// it in place of a majority-class victim, while LAWRRR first applies the
    /// reservoir test (admit with probability `capacity / seen_count`).
    pub fn insert<R: Rng + ?Sized>(
        &mut self,
        entry: MemoryEntry,
        policy: ReplacementPolicy,
        rng: &mut R,
    ) -> Result<Insertion> {
        entry.validate()?;
        self.seen_count += 1;
        if !self.is_full() {
            self.push(entry);
            return Ok(Insertion {
                stored: true,
                victim: None,
            });
        }
        let victim = match policy {
            ReplacementPolicy::Lawcbr => self.lawcbr_select_victim(rng),
            ReplacementPolicy::Lawrrr => {
                if rng.random_range(0..self.seen_count) >= self.capacity as u64 {
                    None
                } else {
                    self.lawrrr_select_victim(rng)
                }
            }
        };
        let Some(victim) = victim else {
            return Ok(Insertion {
                stored: false,
                victim: None,
            });
        };
        self.remove(victim);
        self.push(entry);
        debug_assert!(self.check_invariants());
        Ok(Insertion {
            stored: true,
            victim: Some(victim),
        })
    }

    fn push(&mut self, entry: MemoryEntry) {
        *self.class_counts.entry(entry.y).or_insert(0) += 1;
        self.entries.push(entry);
    }

    fn remove(&mut self, index: usize) {
        let old = self.entries.remove(index);
        let count = self
            .class_counts
            .get_mut(&old.y)
            .expect("stored label is counted");
        *count -= 1;
        if *count == 0 {
            self.class_counts.remove(&old.y);
        }
    }

    /// The class with the most entries; the smallest label wins ties.
    pub fn majority_class(&self) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for (&class, &count) in &self.class_counts {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((class, count));
            }
        }
        best.map(|(class, _)| class)
    }

    /// Picks a victim inside the majority class with probability proportional to `1 / loss`.
    pub fn lawcbr_select_victim<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let class = self.majority_class()?;
        let candidates: Vec<usize> = (0..self.entries.len())
            .filter(|&i| self.entries[i].y == class)
            .collect();
        let weights = candidates
            .iter()
            .map(|&i| 1.0 / self.entries[i].loss.max(MIN_LOSS));
        weighted_pick(&candidates, weights, rng)
    }

    /// Picks a victim over the whole buffer with probability proportional to
    /// `ClassCount(y_i) / loss_i`.
    pub fn lawrrr_select_victim<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let candidates: Vec<usize> = (0..self.entries.len()).collect();
        let weights = self
            .entries
            .iter()
            .map(|e| self.class_count(e.y) as f64 / e.loss.max(MIN_LOSS));
        weighted_pick(&candidates, weights, rng)
    }

    /// Chooses up to `n` distinct entry indices to replay.
    ///
    /// For the positive/negative strategies the high-score half (size
    /// `ceil(n / 2)`) comes first, then the low-score half. Equal scores are
    /// ordered oldest first. With `len <= n` every index is returned.
    pub fn sample_replay<R: Rng + ?Sized>(
        &self,
        n: usize,
        strategy: SamplingStrategy,
        rng: &mut R,
    ) -> Vec<usize> {
        let len = self.entries.len();
        if len <= n {
            return (0..len).collect();
        }
        match strategy {
            SamplingStrategy::Uniform => rand::seq::index::sample(rng, len, n).into_vec(),
            SamplingStrategy::Uapn => self.extremes(n, |e| e.uncertainty),
            SamplingStrategy::Lapn => self.extremes(n, |e| e.loss),
        }
    }

    fn extremes(&self, n: usize, score: impl Fn(&MemoryEntry) -> f64) -> Vec<usize> {
        let high_count = n.div_ceil(2);
        let low_count = n - high_count;
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        // Stable sorts keep insertion order among equal scores.
        order.sort_by(|&a, &b| score(&self.entries[b]).total_cmp(&score(&self.entries[a])));
        let mut picked: Vec<usize> = order[..high_count].to_vec();
        order.sort_by(|&a, &b| score(&self.entries[a]).total_cmp(&score(&self.entries[b])));
        let low: Vec<usize> = order
            .iter()
            .copied()
            .filter(|i| !picked.contains(i))
            .take(low_count)
            .collect();
        picked.extend(low);
        picked
    }

    /// Overwrites loss, logits and uncertainty of the given entries.
    /// Validates everything before touching the buffer.
    pub fn update_scores(
        &mut self,
        indices: &[usize],
        losses: &[f64],
        logits: &[Vec<f64>],
        uncertainties: &[f64],
    ) -> Result<()> {
        for (what, len) in [
            ("losses", losses.len()),
            ("logits", logits.len()),
            ("uncertainties", uncertainties.len()),
        ] {
            if len != indices.len() {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: indices.len(),
                    actual: len,
                });
            }
        }
        for (k, &i) in indices.iter().enumerate() {
            let entry = self.entries.get(i).ok_or(Error::IndexOutOfRange {
                index: i,
                len: self.entries.len(),
            })?;
            if logits[k].len() != entry.h.len() {
                return Err(Error::DimensionMismatch {
                    what: "updated logits",
                    expected: entry.h.len(),
                    actual: logits[k].len(),
                });
            }
            let probe = MemoryEntry {
                z: Vec::new(),
                y: entry.y,
                h: logits[k].clone(),
                loss: losses[k],
                uncertainty: uncertainties[k],
            };
            probe.validate()?;
        }
        for (k, &i) in indices.iter().enumerate() {
            let entry = &mut self.entries[i];
            entry.loss = losses[k];
            entry.h.clone_from(&logits[k]);
            entry.uncertainty = uncertainties[k];
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            capacity: self.capacity,
            len: self.entries.len(),
            seen_count: self.seen_count,
            class_counts: self.class_counts.iter().map(|(&c, &n)| (c, n)).collect(),
            loss_histogram: Histogram::of(self.entries.iter().map(|e| e.loss), HISTOGRAM_BINS),
            uncertainty_histogram: Histogram::of(
                self.entries.iter().map(|e| e.uncertainty),
                HISTOGRAM_BINS,
            ),
        }
    }
}

fn weighted_pick<R: Rng + ?Sized>(
    candidates: &[usize],
    weights: impl Iterator<Item = f64>,
    rng: &mut R,
) -> Option<usize> {
    match candidates {
        [] => None,
        [only] => Some(*only),
        _ => {
            let dist = WeightedIndex::new(weights).ok()?;
            Some(candidates[dist.sample(rng)])
        }
    }
}

const HISTOGRAM_BINS: usize = 10;

/// Equal-width histogram over `[min, max]` of the observed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: impl Iterator<Item = f64> + Clone, bins: usize) -> Self {
        let (min, max) = values
            .clone()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        let mut counts = vec![0; bins];
        if min > max {
            return Self {
                min: 0.0,
                max: 0.0,
                counts,
            };
        }
        let width = (max - min) / bins as f64;
        for v in values {
            let bin = if width > 0.0 {
                (((v - min) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[bin] += 1;
        }
        Self { min, max, counts }
    }
}

/// Diagnostic summary of the buffer contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSnapshot {
    pub capacity: usize,
    pub len: usize,
    pub seen_count: u64,
    pub class_counts: Vec<(usize, usize)>,
    pub loss_histogram: Histogram,
    pub uncertainty_histogram: Histogram,
}
