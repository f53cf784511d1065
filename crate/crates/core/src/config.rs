//! TOML experiment configuration.
//!
//! ```toml
//! dataset = "clusters.bin"
//! seeds = [0, 1, 2]
//! learners = ["finetune", "ciosl"]
//!
//! [ordering]
//! kind = "class-iid"
//!
//! [hyper]
//! lambda1 = 1.0
//! lambda2 = 0.3
//! buffer_capacity = 180
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ordering::{OrderingKind, OrderingSpec};
use crate::trainer::{HyperParams, LearnerKind};

/// Ordering settings; the class group size defaults to the dataset-dependent
/// value when omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrderingConfig {
    pub kind: OrderingKind,
    pub classes_per_increment: Option<usize>,
    pub base_init_fraction: f64,
    pub interleave_block: usize,
    pub event_fraction: f64,
    pub permute_classes: bool,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        let spec = OrderingSpec::default();
        Self {
            kind: spec.kind,
            classes_per_increment: None,
            base_init_fraction: spec.base_init_fraction,
            interleave_block: spec.interleave_block,
            event_fraction: spec.event_fraction,
            permute_classes: spec.permute_classes,
        }
    }
}

impl OrderingConfig {
    pub fn resolve(&self, num_classes: usize) -> OrderingSpec {
        let base = OrderingSpec::for_dataset(self.kind, num_classes);
        OrderingSpec {
            kind: self.kind,
            classes_per_increment: self.classes_per_increment.unwrap_or(base.classes_per_increment),
            base_init_fraction: self.base_init_fraction,
            interleave_block: self.interleave_block,
            event_fraction: self.event_fraction,
            permute_classes: self.permute_classes,
        }
    }
}

fn default_test_fraction() -> f64 {
    0.25
}

fn default_learners() -> Vec<LearnerKind> {
    vec![LearnerKind::FineTune, LearnerKind::Ciosl]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("results.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    /// Separate test file; when absent a stratified holdout of `dataset` is used.
    #[serde(default)]
    pub test_dataset: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Learners compared against the offline reference, which always runs.
    #[serde(default = "default_learners")]
    pub learners: Vec<LearnerKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub ordering: OrderingConfig,
    #[serde(default)]
    pub hyper: HyperParams,
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            test_dataset: None,
            test_fraction: default_test_fraction(),
            split_seed: 0,
            learners: default_learners(),
            seeds: default_seeds(),
            output: default_output(),
            ordering: OrderingConfig::default(),
            hyper: HyperParams::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.dataset);
        if let Some(t) = cfg.test_dataset.as_mut() {
            rebase(t);
        }
        rebase(&mut cfg.output);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Empty("seed list"));
        }
        if self.learners.is_empty() {
            return Err(Error::Empty("learner list"));
        }
        if self.test_dataset.is_none() && !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::InvalidParameter(format!("seed {s} listed twice")));
        }
        self.ordering.resolve(1).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{ReplacementPolicy, SamplingStrategy};

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").unwrap() + "```toml\n".len();
        let end = start + readme[start..].find("```").unwrap();
        let cfg = ExperimentConfig::from_toml(&readme[start..end]).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.ordering.kind, OrderingKind::ClassInstance);
        assert_eq!(cfg.hyper.sampling, SamplingStrategy::Uapn);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("dataset = \"d.bin\"\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::new("d.bin"));
        assert_eq!(cfg.hyper.lambda1, 1.0);
        assert_eq!(cfg.hyper.lambda2, 0.3);
        assert_eq!(cfg.hyper.n_replay, 16);
        assert_eq!(cfg.hyper.sgd.lr, 0.01);
        assert_eq!(cfg.hyper.hidden_dims, vec![256, 256]);
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_and_round_trip() {
        let text = r#"
            dataset = "d.bin"
            seeds = [3, 4]
            learners = ["ciosl"]
            [ordering]
            kind = "class-instance"
            classes_per_increment = 5
            [hyper]
            lambda2 = 0.0
            policy = "lawcbr"
            sampling = "lapn"
            [hyper.sgd]
            lr = 0.02
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.ordering.kind, OrderingKind::ClassInstance);
        assert_eq!(cfg.ordering.resolve(100).classes_per_increment, 5);
        assert_eq!(cfg.hyper.policy, ReplacementPolicy::Lawcbr);
        assert_eq!(cfg.hyper.sampling, SamplingStrategy::Lapn);
        assert_eq!(cfg.hyper.sgd.lr, 0.02);
        assert_eq!(cfg.hyper.sgd.momentum, 0.9);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn class_group_defaults_follow_dataset_size() {
        let cfg = OrderingConfig::default();
        assert_eq!(cfg.resolve(10).classes_per_increment, 2);
        assert_eq!(cfg.resolve(100).classes_per_increment, 10);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_toml("dataset = \"d\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("dataset = \"d\"\n[hyper]\npolicy = \"fifo\"\n").is_err());
        assert!(ExperimentConfig::from_toml("dataset = \"d\"\n[ordering]\nkind = \"random\"\n").is_err());
        let mut cfg = ExperimentConfig::new("d");
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_rebases_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "dataset = \"d.bin\"\noutput = \"/abs/out.jsonl\"\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.dataset, dir.path().join("d.bin"));
        assert_eq!(cfg.output, PathBuf::from("/abs/out.jsonl"));
    }
}
