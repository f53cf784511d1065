//! Base initialization, the per-sample streaming update, evaluation, and the
//! experiment driver for the streaming learner and its two baselines.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetRecord};
use crate::error::{Error, Result};
use crate::memory::{
    BufferSnapshot, MemoryEntry, ReplacementPolicy, ReplayBuffer, SamplingStrategy,
};
use crate::metrics::EvalTrace;
use crate::ordering::{build_stream, OrderingSpec, StreamPlan};
use crate::vbnn::{
    self, argmax, objective_with_sigma, sgd_step, streaming_objective, Distill, FrozenPrior, Labeled,
    MeanFieldPosterior, NetShape, ObjectiveWeights, OptimizerState, Predictor, SgdConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Ciosl,
    FineTune,
    Offline,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Ciosl => "ciosl",
            LearnerKind::FineTune => "finetune",
            LearnerKind::Offline => "offline",
        }
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ciosl" => Ok(LearnerKind::Ciosl),
            "finetune" | "fine-tune" => Ok(LearnerKind::FineTune),
            "offline" => Ok(LearnerKind::Offline),
            other => Err(Error::InvalidParameter(format!("unknown learner `{other}`"))),
        }
    }
}

/// How the streaming objective is scaled before each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Use the summed objective as is.
    Sum,
    /// Divide the whole objective by the number of labeled terms
    /// (`1 + replay batch size`); relative weights are unchanged.
    Mean,
}

/// How test-time predictions are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Average the softmax over `k` weight draws.
    Sampled,
    /// Use the posterior-mean network.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_replay: usize,
    pub n_kd: usize,
    pub k_uncertainty: usize,
    pub buffer_capacity: usize,
    pub policy: ReplacementPolicy,
    pub sampling: SamplingStrategy,
    pub hidden_dims: Vec<usize>,
    pub sgd: SgdConfig,
    pub reduction: Reduction,
    pub init_sigma: f64,
    pub base_epochs: usize,
    pub base_batch: usize,
    pub offline_epochs: usize,
    pub offline_batch: usize,
    pub eval_mode: EvalMode,
    pub eval_samples: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.3,
            n_replay: 16,
            n_kd: 16,
            k_uncertainty: vbnn::DEFAULT_UNCERTAINTY_SAMPLES,
            buffer_capacity: 180,
            policy: ReplacementPolicy::Lawrrr,
            sampling: SamplingStrategy::Uapn,
            hidden_dims: vbnn::DEFAULT_HIDDEN.to_vec(),
            sgd: SgdConfig::default(),
            reduction: Reduction::Mean,
            init_sigma: vbnn::INIT_SIGMA,
            base_epochs: 30,
            base_batch: 16,
            offline_epochs: 30,
            offline_batch: 16,
            eval_mode: EvalMode::Sampled,
            eval_samples: vbnn::DEFAULT_UNCERTAINTY_SAMPLES,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1 must be finite and >= 0");
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad("lambda2 must be finite and >= 0");
        }
        if self.n_replay == 0 || self.n_kd == 0 {
            return bad("n_replay and n_kd must be >= 1");
        }
        if self.k_uncertainty == 0 || self.eval_samples == 0 {
            return bad("sample counts must be >= 1");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be >= 1");
        }
        if self.base_batch == 0 || self.offline_batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.init_sigma > 0.0 && self.init_sigma.is_finite()) {
            return bad("init_sigma must be positive");
        }
        self.sgd.validate()
    }

    pub fn shape(&self, input_dim: usize, num_classes: usize) -> Result<NetShape> {
        NetShape::new(input_dim, self.hidden_dims.clone(), num_classes)
    }
}

/// Independent random streams derived from one experiment seed.
mod streams {
    pub const INIT: u64 = 1;
    pub const BASE: u64 = 2;
    pub const STREAM: u64 = 3;
    pub const EVAL: u64 = 1 << 16;
    pub const OFFLINE: u64 = 1 << 17;
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains a freshly initialized posterior on `records` with shuffled
/// mini-batches.
///
/// The per-batch objective is the mean NLL plus `lambda1 * KL(q || N(0, I)) / N`,
/// i.e. the full-data objective `sum NLL + lambda1 * KL` divided by `N` and
/// estimated on a batch.
pub fn train_offline(
    shape: &NetShape,
    records: &[&DatasetRecord],
    epochs: usize,
    batch: usize,
    hp: &HyperParams,
    init_rng: &mut ChaCha8Rng,
    rng: &mut ChaCha8Rng,
) -> Result<MeanFieldPosterior> {
    if records.is_empty() {
        return Err(Error::Empty("offline training set"));
    }
    if batch == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    let mut posterior = MeanFieldPosterior::initialize(shape.clone(), hp.init_sigma, init_rng)?;
    let prior = FrozenPrior::standard_normal(posterior.param_count());
    let mut opt = OptimizerState::new(hp.sgd, posterior.param_count())?;
    let n = records.len() as f64;
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let labeled: Vec<Labeled<'_>> = chunk
                .iter()
                .map(|&i| Labeled {
                    z: &records[i].z,
                    y: records[i].y,
                })
                .collect();
            let sampler = posterior.sampler();
            let sample = sampler.draw(rng);
            let (_, grads) = objective_with_sigma(
                &posterior,
                sampler.sigma(),
                &prior,
                &sample,
                &labeled,
                &[],
                ObjectiveWeights {
                    nll_scale: 1.0 / chunk.len() as f64,
                    kl_weight: hp.lambda1 / n,
                    kd_weight: 0.0,
                },
            )?;
            sgd_step(&mut posterior, &grads, &mut opt)?;
        }
    }
    Ok(posterior)
}

/// Mutable state of a streaming learner between samples.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub posterior: MeanFieldPosterior,
    pub prior: FrozenPrior,
    pub optimizer: OptimizerState,
    /// `None` for the fine-tuning baseline.
    pub buffer: Option<ReplayBuffer>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gradient_steps: u64,
    rng: ChaCha8Rng,
}

/// Scores every record with one shared set of `k` weight draws.
fn score_entries<'a>(
    posterior: &MeanFieldPosterior,
    items: impl IntoIterator<Item = (&'a [f64], usize)>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<vbnn::SampleScore>> {
    Predictor::sampled(posterior, k, rng)?.score_all(items)
}

/// Offline warm-up on the base set.
///
/// Returns the trained posterior, the prior frozen at it, and (when
/// `capacity` is set) a buffer seeded with the base samples and their
/// post-training scores.
pub fn base_initialize(
    shape: &NetShape,
    records: &[&DatasetRecord],
    hp: &HyperParams,
    capacity: Option<usize>,
    init_rng: &mut ChaCha8Rng,
    rng: &mut ChaCha8Rng,
) -> Result<(MeanFieldPosterior, FrozenPrior, Option<ReplayBuffer>)> {
    if records.is_empty() {
        return Err(Error::Empty("base initialization set"));
    }
    let posterior = train_offline(shape, records, hp.base_epochs, hp.base_batch, hp, init_rng, rng)?;
    let prior = FrozenPrior::from_posterior(&posterior);
    let buffer = match capacity {
        None => None,
        Some(cap) => {
            let mut buffer = ReplayBuffer::new(cap)?;
            let scores = score_entries(
                &posterior,
                records.iter().map(|r| (r.z.as_slice(), r.y)),
                hp.k_uncertainty,
                rng,
            )?;
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(rng);
            for i in order {
                let s = &scores[i];
                buffer.insert(
                    MemoryEntry {
                        z: records[i].z.clone(),
                        y: records[i].y,
                        h: s.logits.clone(),
                        loss: s.loss,
                        uncertainty: s.uncertainty,
                    },
                    hp.policy,
                    rng,
                )?;
            }
            Some(buffer)
        }
    };
    Ok((posterior, prior, buffer))
}

/// What one call to [`StreamState::stream_step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub replayed: Vec<usize>,
    pub distilled: Vec<usize>,
    pub stored: bool,
}

impl StreamState {
    pub fn new(
        posterior: MeanFieldPosterior,
        prior: FrozenPrior,
        buffer: Option<ReplayBuffer>,
        sgd: SgdConfig,
        lambda1: f64,
        lambda2: f64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let optimizer = OptimizerState::new(sgd, posterior.param_count())?;
        Ok(Self {
            posterior,
            prior,
            optimizer,
            buffer,
            lambda1,
            lambda2,
            gradient_steps: 0,
            rng,
        })
    }

    /// One single-pass update on an incoming sample.
    ///
    /// Order of effects: pick the replay batch (configured strategy) and the
    /// distillation batch (uniform); take one SGD step on the streaming loss;
    /// rescore the touched buffer entries under the updated posterior; score
    /// and offer the new sample to the buffer; freeze the updated posterior as
    /// the next prior. On error the learner is left as it was.
    pub fn stream_step(&mut self, sample: &DatasetRecord, hp: &HyperParams) -> Result<StepReport> {
        let shape = self.posterior.shape();
        if sample.z.len() != shape.input_dim {
            return Err(Error::DimensionMismatch {
                what: "embedding",
                expected: shape.input_dim,
                actual: sample.z.len(),
            });
        }
        if sample.y >= shape.output_dim {
            return Err(Error::ClassOutOfRange {
                index: sample.y,
                classes: shape.output_dim,
            });
        }
        if sample.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("incoming embedding"));
        }
        let snapshot = (
            self.posterior.clone(),
            self.optimizer.clone(),
            self.buffer.clone(),
            self.rng.clone(),
        );
        let result = self.step_inner(sample, hp);
        if result.is_err() {
            (self.posterior, self.optimizer, self.buffer, self.rng) = snapshot;
        }
        result
    }

    fn step_inner(&mut self, sample: &DatasetRecord, hp: &HyperParams) -> Result<StepReport> {
        let (replayed, distilled) = match &self.buffer {
            Some(buf) => (
                buf.sample_replay(hp.n_replay, hp.sampling, &mut self.rng),
                buf.sample_replay(hp.n_kd, SamplingStrategy::Uniform, &mut self.rng),
            ),
            None => (Vec::new(), Vec::new()),
        };

        let (mut loss, mut grads) = {
            let entries = self.buffer.as_ref().map_or(&[][..], |b| b.entries());
            let replay: Vec<Labeled<'_>> = replayed
                .iter()
                .map(|&i| Labeled {
                    z: &entries[i].z,
                    y: entries[i].y,
                })
                .collect();
            let kd: Vec<Distill<'_>> = distilled
                .iter()
                .map(|&i| Distill {
                    z: &entries[i].z,
                    h: &entries[i].h,
                })
                .collect();
            let sampler = self.posterior.sampler();
            let draw = sampler.draw(&mut self.rng);
            streaming_objective(
                &self.posterior,
                sampler.sigma(),
                &self.prior,
                &draw,
                Labeled {
                    z: &sample.z,
                    y: sample.y,
                },
                &replay,
                &kd,
                self.lambda1,
                if kd.is_empty() { 0.0 } else { self.lambda2 },
            )?
        };
        if hp.reduction == Reduction::Mean {
            let scale = 1.0 / (1 + replayed.len()) as f64;
            loss *= scale;
            grads.d_mu.iter_mut().for_each(|g| *g *= scale);
            grads.d_rho.iter_mut().for_each(|g| *g *= scale);
        }
        sgd_step(&mut self.posterior, &grads, &mut self.optimizer)?;

        let sampler = self.posterior.sampler();
        let mut stored = false;
        if let Some(buf) = self.buffer.as_mut() {
            let touched: Vec<usize> = replayed
                .iter()
                .chain(&distilled)
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let predictor = Predictor::from_sampler(&sampler, hp.k_uncertainty, &mut self.rng)?;
            let scores = predictor.score_all(
                touched
                    .iter()
                    .map(|&i| (buf.entries()[i].z.as_slice(), buf.entries()[i].y))
                    .chain(std::iter::once((sample.z.as_slice(), sample.y))),
            )?;
            let (old, new) = scores.split_at(touched.len());
            buf.update_scores(
                &touched,
                &old.iter().map(|s| s.loss).collect::<Vec<_>>(),
                &old.iter().map(|s| s.logits.clone()).collect::<Vec<_>>(),
                &old.iter().map(|s| s.uncertainty).collect::<Vec<_>>(),
            )?;
            let fresh = &new[0];
            stored = buf
                .insert(
                    MemoryEntry {
                        z: sample.z.clone(),
                        y: sample.y,
                        h: fresh.logits.clone(),
                        loss: fresh.loss,
                        uncertainty: fresh.uncertainty,
                    },
                    hp.policy,
                    &mut self.rng,
                )?
                .stored;
        }

        self.prior = sampler.freeze();
        self.gradient_steps += 1;
        Ok(StepReport {
            loss,
            replayed,
            distilled,
            stored,
        })
    }
}

/// Fraction of `test` classified correctly; ties go to the lowest class.
pub fn evaluate(
    posterior: &MeanFieldPosterior,
    test: &[&DatasetRecord],
    mode: EvalMode,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let predictor = match mode {
        EvalMode::Sampled => Predictor::sampled(posterior, k, rng)?,
        EvalMode::Mean => Predictor::mean(posterior),
    };
    let predictions = predictor.classify_all(test.iter().map(|r| r.z.as_slice()))?;
    let correct = predictions
        .iter()
        .zip(test)
        .filter(|(p, r)| **p == r.y)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// One testing event as observed while an experiment runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub learner: LearnerKind,
    pub t: usize,
    pub alpha: f64,
    /// Training records revealed so far (base set included).
    pub revealed: usize,
    pub seen_classes: Vec<usize>,
}

/// Result of running one learner through a stream plan.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerRun {
    pub learner: LearnerKind,
    pub events: Vec<EventRecord>,
    /// Gradient steps taken on stream samples (base initialization excluded).
    pub gradient_steps: u64,
    /// Stream indices in the order they triggered an update.
    pub processed: Vec<usize>,
    pub buffer: Option<BufferSnapshot>,
}

impl LearnerRun {
    pub fn alphas(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.alpha).collect()
    }
}

/// A dataset split, an ordering and hyperparameters bound to one seed.
pub struct Experiment<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub hp: HyperParams,
    pub seed: u64,
    pub plan: StreamPlan,
    shape: NetShape,
}

impl<'a> Experiment<'a> {
    pub fn new(
        train: &'a Dataset,
        test: &'a Dataset,
        spec: &OrderingSpec,
        hp: HyperParams,
        seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        if train.dim != test.dim {
            return Err(Error::DimensionMismatch {
                what: "test embedding",
                expected: train.dim,
                actual: test.dim,
            });
        }
        let plan = build_stream(train, spec, seed)?;
        let shape = hp.shape(train.dim, train.num_classes)?;
        Ok(Self {
            train,
            test,
            hp,
            seed,
            plan,
            shape,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    fn records(&self, indices: &[usize]) -> Vec<&'a DatasetRecord> {
        indices.iter().map(|&i| &self.train.records[i]).collect()
    }

    fn seen_classes(&self, event: usize) -> BTreeSet<usize> {
        self.plan
            .revealed(event)
            .into_iter()
            .map(|i| self.train.records[i].y)
            .collect()
    }

    /// Test records whose class has been observed by testing event `event`.
    pub fn test_records(&self, event: usize) -> Vec<&'a DatasetRecord> {
        let seen = self.seen_classes(event);
        self.test
            .records
            .iter()
            .filter(|r| seen.contains(&r.y))
            .collect()
    }

    fn eval_event(
        &self,
        learner: LearnerKind,
        posterior: &MeanFieldPosterior,
        event: usize,
    ) -> Result<EventRecord> {
        let test = self.test_records(event);
        if test.is_empty() {
            return Err(Error::EmptyTestSet { event });
        }
        let mut rng = seeded(self.seed, streams::EVAL + event as u64);
        let alpha = evaluate(posterior, &test, self.hp.eval_mode, self.hp.eval_samples, &mut rng)?;
        Ok(EventRecord {
            learner,
            t: event,
            alpha,
            revealed: self.plan.revealed(event).len(),
            seen_classes: self.seen_classes(event).into_iter().collect(),
        })
    }

    /// Runs a streaming learner (or the offline reference) and reports each
    /// testing event to `observer` as soon as it is measured.
    pub fn run_learner(
        &self,
        learner: LearnerKind,
        observer: &mut dyn FnMut(&EventRecord),
    ) -> Result<LearnerRun> {
        if learner == LearnerKind::Offline {
            return self.offline_reference(observer);
        }
        let mut init_rng = seeded(self.seed, streams::INIT);
        let mut base_rng = seeded(self.seed, streams::BASE);
        let capacity = (learner == LearnerKind::Ciosl).then_some(self.hp.buffer_capacity);
        let (posterior, prior, buffer) = base_initialize(
            &self.shape,
            &self.records(&self.plan.base_init),
            &self.hp,
            capacity,
            &mut init_rng,
            &mut base_rng,
        )?;
        let (lambda1, lambda2) = match learner {
            LearnerKind::Ciosl => (self.hp.lambda1, self.hp.lambda2),
            _ => (0.0, 0.0),
        };
        let mut state = StreamState::new(
            posterior,
            prior,
            buffer,
            self.hp.sgd,
            lambda1,
            lambda2,
            seeded(self.seed, streams::STREAM),
        )?;

        let mut events = Vec::with_capacity(self.plan.testing_events());
        let mut processed = Vec::with_capacity(self.plan.stream_len());
        let first = self.eval_event(learner, &state.posterior, 0)?;
        observer(&first);
        events.push(first);
        for (k, increment) in self.plan.increments.iter().enumerate() {
            for &i in increment {
                state.stream_step(&self.train.records[i], &self.hp)?;
                processed.push(i);
            }
            let ev = self.eval_event(learner, &state.posterior, k + 1)?;
            observer(&ev);
            events.push(ev);
        }
        Ok(LearnerRun {
            learner,
            events,
            gradient_steps: state.gradient_steps,
            processed,
            buffer: state.buffer.as_ref().map(ReplayBuffer::snapshot),
        })
    }

    /// Trains a fresh model from scratch on everything revealed by each
    /// testing event and evaluates it there.
    pub fn offline_reference(&self, observer: &mut dyn FnMut(&EventRecord)) -> Result<LearnerRun> {
        let mut events = Vec::with_capacity(self.plan.testing_events());
        for event in 0..self.plan.testing_events() {
            let revealed = self.records(&self.plan.revealed(event));
            let mut init_rng = seeded(self.seed, streams::OFFLINE + 2 * event as u64);
            let mut rng = seeded(self.seed, streams::OFFLINE + 2 * event as u64 + 1);
            let posterior = train_offline(
                &self.shape,
                &revealed,
                self.hp.offline_epochs,
                self.hp.offline_batch,
                &self.hp,
                &mut init_rng,
                &mut rng,
            )?;
            let ev = self.eval_event(LearnerKind::Offline, &posterior, event)?;
            observer(&ev);
            events.push(ev);
        }
        Ok(LearnerRun {
            learner: LearnerKind::Offline,
            events,
            gradient_steps: 0,
            processed: Vec::new(),
            buffer: None,
        })
    }
}

/// Runs `learner` and the offline reference, pairing their accuracies.
pub fn run_experiment(
    train: &Dataset,
    test: &Dataset,
    spec: &OrderingSpec,
    hp: &HyperParams,
    learner: LearnerKind,
    seed: u64,
) -> Result<EvalTrace> {
    let exp = Experiment::new(train, test, spec, hp.clone(), seed)?;
    let reference = exp.offline_reference(&mut |_| {})?;
    let run = if learner == LearnerKind::Offline {
        reference.clone()
    } else {
        exp.run_learner(learner, &mut |_| {})?
    };
    EvalTrace::pair(&run.alphas(), &reference.alphas())
}

/// Predicted class under the posterior mean; handy for inspection.
pub fn predict_mean(posterior: &MeanFieldPosterior, z: &[f64]) -> Result<usize> {
    Ok(argmax(&Predictor::mean(posterior).proba(z)?))
}
