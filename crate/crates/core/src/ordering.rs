//! Seeded stream plans for the four data orderings.
//!
//! A plan is a base-initialization set followed by increments. The learner is
//! evaluated after the base set and after every increment, so for the class
//! orderings an increment is a group of new classes, while for the iid and
//! instance orderings the stream is cut into equal slices (5% each by default).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DatasetRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingKind {
    Iid,
    ClassIid,
    Instance,
    ClassInstance,
}

impl OrderingKind {
    pub const ALL: [OrderingKind; 4] = [
        OrderingKind::Iid,
        OrderingKind::ClassIid,
        OrderingKind::Instance,
        OrderingKind::ClassInstance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrderingKind::Iid => "iid",
            OrderingKind::ClassIid => "class-iid",
            OrderingKind::Instance => "instance",
            OrderingKind::ClassInstance => "class-instance",
        }
    }

    pub fn needs_instances(self) -> bool {
        matches!(self, OrderingKind::Instance | OrderingKind::ClassInstance)
    }

    pub fn is_class_incremental(self) -> bool {
        matches!(self, OrderingKind::ClassIid | OrderingKind::ClassInstance)
    }
}

impl std::str::FromStr for OrderingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown ordering `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderingSpec {
    pub kind: OrderingKind,
    pub classes_per_increment: usize,
    /// Share of the data used for base initialization (iid and instance kinds).
    pub base_init_fraction: f64,
    /// Frames per instance block in the instance ordering.
    pub interleave_block: usize,
    /// Share of the stream between testing events (iid and instance kinds).
    pub event_fraction: f64,
    /// Visit classes in a seeded random order rather than label order.
    pub permute_classes: bool,
}

impl Default for OrderingSpec {
    fn default() -> Self {
        Self {
            kind: OrderingKind::ClassIid,
            classes_per_increment: 2,
            base_init_fraction: 0.10,
            interleave_block: 50,
            event_fraction: 0.05,
            permute_classes: true,
        }
    }
}

impl OrderingSpec {
    /// Defaults scaled to the dataset: 2 classes per increment below 50
    /// classes, 10 otherwise.
    pub fn for_dataset(kind: OrderingKind, num_classes: usize) -> Self {
        Self {
            kind,
            classes_per_increment: if num_classes >= 50 { 10 } else { 2 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_increment == 0 {
            return Err(Error::InvalidParameter(
                "classes_per_increment must be >= 1".into(),
            ));
        }
        if !(self.base_init_fraction > 0.0 && self.base_init_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "base_init_fraction must lie in (0, 1), got {}",
                self.base_init_fraction
            )));
        }
        if self.interleave_block == 0 {
            return Err(Error::InvalidParameter("interleave_block must be >= 1".into()));
        }
        if !(self.event_fraction > 0.0 && self.event_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "event_fraction must lie in (0, 1], got {}",
                self.event_fraction
            )));
        }
        Ok(())
    }
}

/// Record indices in streaming order. A testing event follows the base set
/// and each increment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub base_init: Vec<usize>,
    pub increments: Vec<Vec<usize>>,
}

impl StreamPlan {
    pub fn stream_len(&self) -> usize {
        self.increments.iter().map(Vec::len).sum()
    }

    pub fn testing_events(&self) -> usize {
        1 + self.increments.len()
    }

    /// All streamed indices in order, excluding the base set.
    pub fn stream(&self) -> impl Iterator<Item = usize> + '_ {
        self.increments.iter().flatten().copied()
    }

    /// Indices revealed up to and including testing event `event`
    /// (event 0 is right after base initialization).
    pub fn revealed(&self, event: usize) -> Vec<usize> {
        let mut out = self.base_init.clone();
        for inc in self.increments.iter().take(event) {
            out.extend_from_slice(inc);
        }
        out
    }

    /// Checks that every index below `n` appears exactly once.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for i in self.base_init.iter().chain(self.increments.iter().flatten()) {
            match seen.get_mut(*i) {
                Some(slot) if !*slot => *slot = true,
                _ => return false,
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Builds the stream plan for `dataset` under `spec`, deterministically in `seed`.
pub fn build_stream(dataset: &Dataset, spec: &OrderingSpec, seed: u64) -> Result<StreamPlan> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if spec.kind.needs_instances() && !dataset.has_instances {
        return Err(Error::MissingInstanceMetadata(spec.kind.name()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = &dataset.records;
    let plan = match spec.kind {
        OrderingKind::Iid => {
            let (base, mut rest) = random_base(records.len(), spec.base_init_fraction, &mut rng);
            rest.shuffle(&mut rng);
            StreamPlan {
                base_init: base,
                increments: slice_events(rest, spec.event_fraction),
            }
        }
        OrderingKind::Instance => {
            let (base, rest) = random_base(records.len(), spec.base_init_fraction, &mut rng);
            let instances = instance_runs(records, &rest, &mut rng);
            let stream = interleave_blocks(instances, spec.interleave_block);
            StreamPlan {
                base_init: base,
                increments: slice_events(stream, spec.event_fraction),
            }
        }
        OrderingKind::ClassIid | OrderingKind::ClassInstance => {
            let groups = class_groups(dataset, spec, &mut rng);
            let mut segments = Vec::with_capacity(groups.len());
            for group in &groups {
                let segment = if spec.kind == OrderingKind::ClassIid {
                    let mut seg: Vec<usize> = (0..records.len())
                        .filter(|&i| group.contains(&records[i].y))
                        .collect();
                    seg.shuffle(&mut rng);
                    seg
                } else {
                    let mut seg = Vec::new();
                    for &class in group {
                        let members: Vec<usize> = (0..records.len())
                            .filter(|&i| records[i].y == class)
                            .collect();
                        for run in instance_runs(records, &members, &mut rng) {
                            seg.extend(run);
                        }
                    }
                    seg
                };
                segments.push(segment);
            }
            let mut segments = segments.into_iter();
            StreamPlan {
                base_init: segments.next().unwrap_or_default(),
                increments: segments.filter(|s| !s.is_empty()).collect(),
            }
        }
    };
    if plan.base_init.is_empty() {
        return Err(Error::Empty("base initialization set"));
    }
    debug_assert!(plan.is_partition_of(records.len()));
    Ok(plan)
}

fn random_base(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n_base = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let rest = all.split_off(n_base);
    let mut base = all;
    base.sort_unstable();
    let mut rest = rest;
    rest.sort_unstable();
    (base, rest)
}

/// Groups `indices` by object instance `(class, instance_id)`, each run sorted
/// by frame index, runs in a seeded order.
fn instance_runs(
    records: &[DatasetRecord],
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut runs: BTreeMap<(usize, u32), Vec<usize>> = BTreeMap::new();
    for &i in indices {
        runs.entry((records[i].y, records[i].instance_id))
            .or_default()
            .push(i);
    }
    let mut runs: Vec<Vec<usize>> = runs.into_values().collect();
    for run in &mut runs {
        run.sort_by_key(|&i| (records[i].frame_index, i));
    }
    runs.shuffle(rng);
    runs
}

/// Round-robin over instances, `block` consecutive frames at a time.
fn interleave_blocks(runs: Vec<Vec<usize>>, block: usize) -> Vec<usize> {
    let total = runs.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total);
    let mut offset = 0;
    while out.len() < total {
        for run in &runs {
            if offset < run.len() {
                out.extend_from_slice(&run[offset..(offset + block).min(run.len())]);
            }
        }
        offset += block;
    }
    out
}

fn slice_events(stream: Vec<usize>, fraction: f64) -> Vec<Vec<usize>> {
    if stream.is_empty() {
        return Vec::new();
    }
    let size = ((stream.len() as f64 * fraction).ceil() as usize).max(1);
    stream.chunks(size).map(<[usize]>::to_vec).collect()
}

fn class_groups(dataset: &Dataset, spec: &OrderingSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut classes: Vec<usize> = (0..dataset.num_classes).collect();
    if spec.permute_classes {
        classes.shuffle(rng);
    }
    if !dataset.num_classes.is_multiple_of(spec.classes_per_increment) {
        log::warn!(
            "{} classes do not divide into increments of {}; the last increment is smaller",
            dataset.num_classes,
            spec.classes_per_increment
        );
    }
    classes
        .chunks(spec.classes_per_increment)
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn dataset(classes: usize, instances: u32, frames: u32, with_meta: bool) -> Dataset {
        let mut records = Vec::new();
        for y in 0..classes {
            for inst in 0..instances {
                for f in 0..frames {
                    records.push(DatasetRecord {
                        z: vec![0.0],
                        y,
                        instance_id: inst,
                        frame_index: f,
                    });
                }
            }
        }
        Dataset::new(1, classes, with_meta, records).unwrap()
    }

    fn classes_of(ds: &Dataset, idx: &[usize]) -> BTreeSet<usize> {
        idx.iter().map(|&i| ds.records[i].y).collect()
    }

    #[test]
    fn class_iid_in_label_order() {
        let ds = dataset(4, 1, 10, false);
        let spec = OrderingSpec {
            kind: OrderingKind::ClassIid,
            permute_classes: false,
            ..OrderingSpec::default()
        };
        let plan = build_stream(&ds, &spec, 3).unwrap();
        assert_eq!(classes_of(&ds, &plan.base_init), BTreeSet::from([0, 1]));
        assert_eq!(plan.increments.len(), 1);
        assert_eq!(classes_of(&ds, &plan.increments[0]), BTreeSet::from([2, 3]));
        assert_eq!(plan.testing_events(), 2);
    }

    #[test]
    fn class_increments_are_disjoint() {
        let ds = dataset(10, 2, 5, true);
        for kind in [OrderingKind::ClassIid, OrderingKind::ClassInstance] {
            let spec = OrderingSpec::for_dataset(kind, 10);
            let plan = build_stream(&ds, &spec, 8).unwrap();
            let mut seen = classes_of(&ds, &plan.base_init);
            assert_eq!(seen.len(), 2);
            for inc in &plan.increments {
                let cls = classes_of(&ds, inc);
                assert_eq!(cls.len(), 2);
                assert!(cls.is_disjoint(&seen));
                seen.extend(cls);
            }
        }
    }

    #[test]
    fn uneven_class_split_makes_short_last_increment() {
        let ds = dataset(5, 1, 3, false);
        let spec = OrderingSpec::for_dataset(OrderingKind::ClassIid, 5);
        let plan = build_stream(&ds, &spec, 0).unwrap();
        assert_eq!(plan.increments.len(), 2);
        assert_eq!(classes_of(&ds, plan.increments.last().unwrap()).len(), 1);
    }

    #[test]
    fn same_seed_same_plan() {
        let ds = dataset(4, 3, 20, true);
        for kind in OrderingKind::ALL {
            let spec = OrderingSpec::for_dataset(kind, 4);
            assert_eq!(build_stream(&ds, &spec, 42).unwrap(), build_stream(&ds, &spec, 42).unwrap());
            assert_eq!(
                build_stream(&ds, &spec, 42).unwrap().digest(),
                build_stream(&ds, &spec, 42).unwrap().digest()
            );
        }
    }

    #[test]
    fn instance_round_robin_blocks() {
        let ds = dataset(1, 2, 120, true);
        let spec = OrderingSpec {
            kind: OrderingKind::Instance,
            ..OrderingSpec::default()
        };
        let plan = build_stream(&ds, &spec, 5).unwrap();
        let stream: Vec<usize> = plan.stream().collect();
        let first = ds.records[stream[0]].instance_id;
        let frames_of = |inst: u32| -> Vec<usize> {
            stream
                .iter()
                .copied()
                .filter(|&i| ds.records[i].instance_id == inst)
                .collect()
        };
        let a = frames_of(first);
        let b = frames_of(1 - first);
        let mut expected: Vec<usize> = Vec::new();
        for start in (0..120).step_by(50) {
            for run in [&a, &b] {
                expected.extend(run.iter().skip(start).take(50));
            }
        }
        assert_eq!(stream, expected);
        // Frames within each instance are strictly increasing.
        for run in [&a, &b] {
            assert!(run.windows(2).all(|w| ds.records[w[0]].frame_index < ds.records[w[1]].frame_index));
        }
    }

    #[test]
    fn instance_round_robin_without_base_holes() {
        // Enumerated by hand: with a 50-frame block the walk is
        // A0-49, B0-49, A50-99, B50-99, A100-119, B100-119.
        let runs = vec![(0..120).collect::<Vec<usize>>(), (120..240).collect()];
        let out = interleave_blocks(runs, 50);
        let expected: Vec<usize> = (0..50)
            .chain(120..170)
            .chain(50..100)
            .chain(170..220)
            .chain(100..120)
            .chain(220..240)
            .collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn class_instance_keeps_classes_and_instances_contiguous() {
        let ds = dataset(4, 3, 7, true);
        let spec = OrderingSpec::for_dataset(OrderingKind::ClassInstance, 4);
        let plan = build_stream(&ds, &spec, 11).unwrap();
        for inc in &plan.increments {
            let keys: Vec<(usize, u32)> = inc
                .iter()
                .map(|&i| (ds.records[i].y, ds.records[i].instance_id))
                .collect();
            let mut runs = keys.clone();
            runs.dedup();
            let distinct: BTreeSet<_> = keys.iter().collect();
            assert_eq!(runs.len(), distinct.len(), "instance revisited");
            let mut classes: Vec<usize> = keys.iter().map(|k| k.0).collect();
            classes.dedup();
            assert_eq!(classes.len(), 2, "class revisited");
            for w in inc.windows(2) {
                let (a, b) = (&ds.records[w[0]], &ds.records[w[1]]);
                if (a.y, a.instance_id) == (b.y, b.instance_id) {
                    assert!(a.frame_index <= b.frame_index);
                }
            }
        }
    }

    #[test]
    fn iid_base_fraction_and_event_slices() {
        let ds = dataset(10, 1, 100, false);
        let spec = OrderingSpec::for_dataset(OrderingKind::Iid, 10);
        let plan = build_stream(&ds, &spec, 1).unwrap();
        assert_eq!(plan.base_init.len(), 100);
        assert_eq!(plan.increments.len(), 20);
        assert!(plan.increments.iter().all(|inc| inc.len() == 45));
    }

    #[test]
    fn instance_kinds_need_metadata() {
        let ds = dataset(2, 1, 10, false);
        for kind in [OrderingKind::Instance, OrderingKind::ClassInstance] {
            let spec = OrderingSpec::for_dataset(kind, 2);
            assert!(matches!(build_stream(&ds, &spec, 0), Err(Error::MissingInstanceMetadata(_))));
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = Dataset::new(1, 2, false, vec![]).unwrap();
        assert!(build_stream(&ds, &OrderingSpec::default(), 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn every_plan_partitions_the_dataset(
                classes in 1usize..7,
                instances in 1u32..4,
                frames in 1u32..30,
                kind_idx in 0usize..4,
                cpi in 1usize..4,
                block in 1usize..60,
                frac in 0.05f64..0.9,
                seed in any::<u64>(),
            ) {
                let ds = dataset(classes, instances, frames, true);
                let spec = OrderingSpec {
                    kind: OrderingKind::ALL[kind_idx],
                    classes_per_increment: cpi,
                    base_init_fraction: frac,
                    interleave_block: block,
                    ..OrderingSpec::default()
                };
                let plan = build_stream(&ds, &spec, seed).unwrap();
                prop_assert!(plan.is_partition_of(ds.len()));
            }
        }
    }
}
