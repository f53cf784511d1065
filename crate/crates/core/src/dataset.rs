//! In-memory embedding datasets.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One precomputed embedding with its label and temporal metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub z: Vec<f64>,
    pub y: usize,
    pub instance_id: u32,
    pub frame_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    /// Whether `instance_id` / `frame_index` carry real temporal information.
    pub has_instances: bool,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        has_instances: bool,
        records: Vec<DatasetRecord>,
    ) -> Result<Self> {
        let ds = Self {
            dim,
            num_classes,
            has_instances,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidParameter(
                "dataset dimension and class count must be positive".into(),
            ));
        }
        let mut frames = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.z.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    what: "record embedding",
                    expected: self.dim,
                    actual: r.z.len(),
                });
            }
            if r.y >= self.num_classes {
                return Err(Error::ClassOutOfRange {
                    index: r.y,
                    classes: self.num_classes,
                });
            }
            if r.z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("record embedding"));
            }
            if self.has_instances && !frames.insert((r.y, r.instance_id, r.frame_index)) {
                return Err(Error::InvalidParameter(format!(
                    "record {i}: frame {} repeated for class {}, instance {}",
                    r.frame_index, r.y, r.instance_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dim: self.dim,
            num_classes: self.num_classes,
            has_instances: self.has_instances,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Splits off roughly `test_fraction` of every class as a held-out test set.
    ///
    /// The split is a seeded per-class shuffle; both halves keep file order, so
    /// temporal ordering inside the training half is preserved.
    pub fn split_holdout(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            by_class.entry(r.y).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut test = Vec::new();
        for indices in by_class.values() {
            let mut shuffled = indices.clone();
            shuffled.shuffle(&mut rng);
            let n_test = ((indices.len() as f64 * test_fraction).round() as usize)
                .min(indices.len().saturating_sub(1));
            test.extend_from_slice(&shuffled[..n_test]);
        }
        test.sort_unstable();
        let test_set: HashSet<usize> = test.iter().copied().collect();
        let train: Vec<usize> = (0..self.records.len())
            .filter(|i| !test_set.contains(i))
            .collect();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_per_class: usize, classes: usize) -> Dataset {
        let records = (0..classes)
            .flat_map(|y| {
                (0..n_per_class).map(move |f| DatasetRecord {
                    z: vec![y as f64, f as f64],
                    y,
                    instance_id: 0,
                    frame_index: f as u32,
                })
            })
            .collect();
        Dataset::new(2, classes, true, records).unwrap()
    }

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let ds = toy(20, 3);
        let (train, test) = ds.split_holdout(0.25, 1).unwrap();
        assert_eq!(train.len() + test.len(), 60);
        for y in 0..3 {
            assert_eq!(test.records.iter().filter(|r| r.y == y).count(), 5);
        }
        for r in &test.records {
            assert!(!train.records.contains(r));
        }
        // Training frames stay in temporal order.
        for w in train.records.windows(2) {
            if w[0].y == w[1].y {
                assert!(w[0].frame_index < w[1].frame_index);
            }
        }
    }

    #[test]
    fn duplicate_frames_rejected() {
        let mut ds = toy(2, 1);
        ds.records[1].frame_index = 0;
        assert!(ds.validate().is_err());
    }
}
