//! Multi-seed experiment execution and the line-delimited JSON results file.
//!
//! While a run is in progress every testing event is appended to
//! `<output>.partial`. On success the complete file (header, events, per-run
//! records, summary) is written atomically to `<output>` and the partial trace
//! is removed; after a failure only the partial trace remains.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::{decode, write_atomic};
use crate::memory::BufferSnapshot;
use crate::metrics::{mean_std, offline_mean, omega_all, EvalTrace, MeanStd};
use crate::ordering::{build_stream, OrderingKind, OrderingSpec};
use crate::trainer::{EventRecord, Experiment, HyperParams, LearnerKind, LearnerRun};

pub const FORMAT: &str = "ciosl-results/1";

/// Everything needed to repeat a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub dataset: String,
    pub dataset_sha256: String,
    pub test_dataset: Option<String>,
    pub test_dataset_sha256: Option<String>,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub learners: Vec<LearnerKind>,
    pub seeds: Vec<u64>,
    pub ordering: OrderingSpec,
    pub hyper: HyperParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub learner: LearnerKind,
    pub plan_digest: String,
    pub stream_len: usize,
    pub omega_all: f64,
    pub offline_hat: f64,
    pub gradient_steps: u64,
    pub alpha: Vec<f64>,
    pub alpha_offline: Vec<f64>,
    pub buffer: Option<BufferSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub learner: LearnerKind,
    pub omega_all: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub learner: LearnerKind,
    pub t: usize,
    pub alpha: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ResolvedConfig,
    pub ordering: OrderingKind,
    /// `(seed, stream plan digest)` pairs.
    pub plan_digests: Vec<(u64, String)>,
    /// One row per learner, offline reference first.
    pub table: Vec<TableRow>,
    pub offline_hat: MeanStd,
    /// Mean accuracy per testing event across seeds; empty when seeds produced
    /// different numbers of events.
    pub per_event: Vec<EventRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ResultLine {
    Header {
        format: String,
        partial: bool,
        config: ResolvedConfig,
    },
    Event {
        seed: u64,
        #[serde(flatten)]
        event: EventRecord,
    },
    Run(RunRecord),
    Summary(Summary),
}

fn to_line(line: &ResultLine) -> String {
    let mut s = serde_json::to_string(line).expect("result lines serialize");
    s.push('\n');
    s
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A dataset file together with the hash of its bytes.
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub sha256: String,
}

pub fn load_hashed(path: &Path) -> Result<LoadedDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(LoadedDataset {
        dataset: decode(&bytes)?,
        sha256: sha256_hex(&bytes),
    })
}

/// Datasets, split and resolved ordering, checked before anything runs.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub resolved: ResolvedConfig,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let main = load_hashed(&cfg.dataset)?;
    let (train, test, test_hash) = match &cfg.test_dataset {
        Some(path) => {
            let t = load_hashed(path)?;
            if t.dataset.dim != main.dataset.dim || t.dataset.num_classes != main.dataset.num_classes {
                return Err(Error::InvalidParameter(format!(
                    "test dataset {} does not match the training dataset's dimension and class count",
                    path.display()
                )));
            }
            (main.dataset, t.dataset, Some(t.sha256))
        }
        None => {
            let (train, test) = main.dataset.split_holdout(cfg.test_fraction, cfg.split_seed)?;
            (train, test, None)
        }
    };
    let ordering = cfg.ordering.resolve(train.num_classes);
    ordering.validate()?;
    for &seed in &cfg.seeds {
        build_stream(&train, &ordering, seed)?;
    }
    let resolved = ResolvedConfig {
        dataset: cfg.dataset.display().to_string(),
        dataset_sha256: main.sha256,
        test_dataset: cfg.test_dataset.as_ref().map(|p| p.display().to_string()),
        test_dataset_sha256: test_hash,
        test_fraction: cfg.test_fraction,
        split_seed: cfg.split_seed,
        learners: cfg.learners.clone(),
        seeds: cfg.seeds.clone(),
        ordering,
        hyper: cfg.hyper.clone(),
    };
    Ok(Prepared {
        train,
        test,
        resolved,
    })
}

/// All learners plus the offline reference for one seed.
pub struct SeedOutcome {
    pub seed: u64,
    pub plan_digest: String,
    pub stream_len: usize,
    pub reference: LearnerRun,
    pub runs: Vec<LearnerRun>,
}

pub fn run_seed(
    prepared: &Prepared,
    seed: u64,
    observer: &(dyn Fn(u64, &EventRecord) + Sync),
) -> Result<SeedOutcome> {
    let cfg = &prepared.resolved;
    let exp = Experiment::new(&prepared.train, &prepared.test, &cfg.ordering, cfg.hyper.clone(), seed)?;
    let mut notify = |e: &EventRecord| observer(seed, e);
    let reference = exp.offline_reference(&mut notify)?;
    let mut runs = Vec::with_capacity(cfg.learners.len());
    for &learner in &cfg.learners {
        let run = if learner == LearnerKind::Offline {
            reference.clone()
        } else {
            exp.run_learner(learner, &mut notify)?
        };
        runs.push(run);
    }
    Ok(SeedOutcome {
        seed,
        plan_digest: exp.plan.digest(),
        stream_len: exp.plan.stream_len(),
        reference,
        runs,
    })
}

fn run_record(outcome: &SeedOutcome, run: &LearnerRun) -> Result<RunRecord> {
    let alpha = run.alphas();
    let alpha_offline = outcome.reference.alphas();
    let trace = EvalTrace::pair(&alpha, &alpha_offline)?;
    Ok(RunRecord {
        seed: outcome.seed,
        learner: run.learner,
        plan_digest: outcome.plan_digest.clone(),
        stream_len: outcome.stream_len,
        omega_all: omega_all(&trace)?,
        offline_hat: offline_mean(&alpha_offline)?,
        gradient_steps: run.gradient_steps,
        alpha,
        alpha_offline,
        buffer: run.buffer.clone(),
    })
}

pub fn summarize(resolved: &ResolvedConfig, outcomes: &[SeedOutcome]) -> Result<(Vec<RunRecord>, Summary)> {
    let mut records = Vec::new();
    let mut by_learner: BTreeMap<usize, (LearnerKind, Vec<&LearnerRun>)> = BTreeMap::new();
    let mut offline_hats = Vec::new();
    let mut plan_digests = Vec::new();
    for o in outcomes {
        plan_digests.push((o.seed, o.plan_digest.clone()));
        offline_hats.push(offline_mean(&o.reference.alphas())?);
        by_learner
            .entry(0)
            .or_insert_with(|| (LearnerKind::Offline, Vec::new()))
            .1
            .push(&o.reference);
        for (i, run) in o.runs.iter().enumerate() {
            records.push(run_record(o, run)?);
            if run.learner != LearnerKind::Offline {
                by_learner
                    .entry(i + 1)
                    .or_insert_with(|| (run.learner, Vec::new()))
                    .1
                    .push(run);
            }
        }
    }
    let mut table = Vec::new();
    let mut per_event = Vec::new();
    let events = outcomes.first().map_or(0, |o| o.reference.events.len());
    let uniform = outcomes.iter().all(|o| o.reference.events.len() == events);
    for (idx, (learner, runs)) in &by_learner {
        let omegas: Vec<f64> = if *idx == 0 {
            outcomes
                .iter()
                .map(|o| {
                    let a = o.reference.alphas();
                    omega_all(&EvalTrace::pair(&a, &a)?)
                })
                .collect::<Result<_>>()?
        } else {
            records
                .iter()
                .filter(|r| r.learner == *learner)
                .map(|r| r.omega_all)
                .collect()
        };
        table.push(TableRow {
            learner: *learner,
            omega_all: mean_std(&omegas)?,
        });
        if uniform {
            for t in 0..events {
                let alphas: Vec<f64> = runs.iter().map(|r| r.events[t].alpha).collect();
                per_event.push(EventRow {
                    learner: *learner,
                    t,
                    alpha: mean_std(&alphas)?,
                });
            }
        }
    }
    let summary = Summary {
        config: resolved.clone(),
        ordering: resolved.ordering.kind,
        plan_digests,
        table,
        offline_hat: mean_std(&offline_hats)?,
        per_event,
    };
    Ok((records, summary))
}

pub fn partial_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    output.with_file_name(name)
}

/// Runs every seed of `cfg` on a pool of `jobs` threads (all cores when
/// `None`) and writes the results file. Returns the summary.
pub fn execute(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<Summary> {
    let prepared = prepare(cfg)?;
    let output = cfg.output.clone();
    let partial = partial_path(&output);
    let header = |partial: bool| ResultLine::Header {
        format: FORMAT.to_string(),
        partial,
        config: prepared.resolved.clone(),
    };
    let mut file = fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    file.write_all(to_line(&header(true)).as_bytes())
        .map_err(|e| Error::io(&partial, e))?;
    let writer = Mutex::new(file);
    let observer = |seed: u64, event: &EventRecord| {
        let line = to_line(&ResultLine::Event {
            seed,
            event: event.clone(),
        });
        let mut f = writer.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
            log::warn!("could not append to {}: {e}", partial.display());
        }
    };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        prepared
            .resolved
            .seeds
            .par_iter()
            .map(|&seed| {
                log::info!("seed {seed}: starting");
                let out = run_seed(&prepared, seed, &observer);
                log::info!("seed {seed}: finished");
                out
            })
            .collect::<Result<_>>()
    })?;
    drop(writer);

    let (records, summary) = summarize(&prepared.resolved, &outcomes)?;
    let mut text = to_line(&header(false));
    for o in &outcomes {
        for run in std::iter::once(&o.reference).chain(o.runs.iter().filter(|r| r.learner != LearnerKind::Offline)) {
            for e in &run.events {
                text.push_str(&to_line(&ResultLine::Event {
                    seed: o.seed,
                    event: e.clone(),
                }));
            }
        }
    }
    for r in records {
        text.push_str(&to_line(&ResultLine::Run(r)));
    }
    text.push_str(&to_line(&ResultLine::Summary(summary.clone())));
    write_atomic(&output, text.as_bytes())?;
    fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?;
    Ok(summary)
}

/// Reads every line of a results file.
pub fn read_results(path: &Path) -> Result<Vec<ResultLine>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidParameter(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(parsed);
    }
    Ok(out)
}

fn learner_label(l: LearnerKind) -> &'static str {
    match l {
        LearnerKind::Offline => "Offline",
        LearnerKind::FineTune => "Fine-Tune",
        LearnerKind::Ciosl => "CIOSL",
    }
}

/// Renders summaries as a text table: one row per learner, one column per
/// ordering, cells `mean ± std` of the normalized performance, followed by
/// the mean offline accuracy.
pub fn render_table(summaries: &[Summary]) -> String {
    let mut columns: Vec<OrderingKind> = Vec::new();
    for kind in OrderingKind::ALL {
        if summaries.iter().any(|s| s.ordering == kind) {
            columns.push(kind);
        }
    }
    let mut rows: Vec<LearnerKind> = Vec::new();
    for l in [LearnerKind::Offline, LearnerKind::FineTune, LearnerKind::Ciosl] {
        if summaries.iter().any(|s| s.table.iter().any(|r| r.learner == l)) {
            rows.push(l);
        }
    }
    let cell = |m: &MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
    let lookup = |kind: OrderingKind, f: &dyn Fn(&Summary) -> Option<String>| {
        summaries
            .iter()
            .rev()
            .filter(|s| s.ordering == kind)
            .find_map(f)
            .unwrap_or_else(|| "-".to_string())
    };
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut head = vec!["Method".to_string()];
    head.extend(columns.iter().map(|k| k.name().to_string()));
    grid.push(head);
    for &l in &rows {
        let mut row = vec![learner_label(l).to_string()];
        for &k in &columns {
            row.push(lookup(k, &|s| {
                s.table.iter().find(|r| r.learner == l).map(|r| cell(&r.omega_all))
            }));
        }
        grid.push(row);
    }
    let mut hat = vec!["Offline-hat".to_string()];
    for &k in &columns {
        hat.push(lookup(k, &|s| Some(cell(&s.offline_hat))));
    }
    grid.push(hat);

    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}", w = *w))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}
