//! Command-line front end: `run`, `gen-synthetic`, `import-csv`, `report`.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::config::ExperimentConfig;
use crate::io::{import_csv, write_dataset};
use crate::memory::{ReplacementPolicy, SamplingStrategy};
use crate::ordering::OrderingKind;
use crate::results::{execute, read_results, render_table, ResultLine};
use crate::synth::{gen_synthetic, SyntheticSpec};
use crate::trainer::LearnerKind;

#[derive(Debug, Parser)]
#[command(name = "ciosl", version, about = "Class-incremental online streaming learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run experiments and write a results file.
    Run(RunArgs),
    /// Generate a synthetic clustered embedding dataset.
    GenSynthetic(GenArgs),
    /// Convert a CSV file to the binary dataset format.
    ImportCsv(ImportArgs),
    /// Print the normalized-performance table of one or more results files.
    Report(ReportArgs),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Seed list given as one flag value; a bare `Vec` would make clap expect repeats.
#[derive(Debug, Clone)]
struct Seeds(Vec<u64>);

#[derive(Debug, Clone)]
struct Learners(Vec<LearnerKind>);

fn parse_seed_flag(s: &str) -> Result<Seeds, String> {
    parse_seeds(s).map(Seeds)
}

fn parse_learner_flag(s: &str) -> Result<Learners, String> {
    parse_learners(s).map(Learners)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if s.contains(',') {
        s.split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad seed `{p}`: {e}")))
            .collect()
    } else {
        let n: u64 = s.parse().map_err(|e| format!("bad seed count `{s}`: {e}"))?;
        if n == 0 {
            return Err("seed count must be at least 1".into());
        }
        Ok((0..n).collect())
    }
}

fn parse_learners(s: &str) -> Result<Vec<LearnerKind>, String> {
    s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{e}"))).collect()
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file (overrides the config).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Separate test dataset (otherwise a holdout split is used).
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    /// iid | class-iid | instance | class-instance
    #[arg(long, value_parser = parse_enum::<OrderingKind>)]
    ordering: Option<OrderingKind>,
    /// lawcbr | lawrrr
    #[arg(long, value_parser = parse_enum::<ReplacementPolicy>)]
    policy: Option<ReplacementPolicy>,
    /// uniform | uapn | lapn
    #[arg(long, value_parser = parse_enum::<SamplingStrategy>)]
    sampling: Option<SamplingStrategy>,
    /// Weight of the KL pull toward the previous posterior.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the logit distillation penalty.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Replay buffer capacity.
    #[arg(long)]
    capacity: Option<usize>,
    /// Number of seeds (0..N) or a comma-separated seed list.
    #[arg(long, value_parser = parse_seed_flag)]
    seeds: Option<Seeds>,
    /// Comma-separated learners: ciosl, finetune, offline.
    #[arg(long, value_parser = parse_learner_flag)]
    learners: Option<Learners>,
    /// Results file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: available processors).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    instances: usize,
    #[arg(long, default_value_t = 120)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().spread)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ImportArgs {
    /// CSV with a header row and a `label` column.
    #[arg(long)]
    input: PathBuf,
    /// Class count (default: largest label + 1).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Results files to tabulate.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn resolve_run_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.dataset) {
        (Some(path), _) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        (None, Some(ds)) => ExperimentConfig::new(ds),
        (None, None) => bail!("`run` needs --config or --dataset"),
    };
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(t) = &args.test_dataset {
        cfg.test_dataset = Some(t.clone());
    }
    if let Some(k) = args.ordering {
        cfg.ordering.kind = k;
    }
    if let Some(p) = args.policy {
        cfg.hyper.policy = p;
    }
    if let Some(s) = args.sampling {
        cfg.hyper.sampling = s;
    }
    if let Some(v) = args.lambda1 {
        cfg.hyper.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        cfg.hyper.lambda2 = v;
    }
    if let Some(c) = args.capacity {
        cfg.hyper.buffer_capacity = c;
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.0.clone();
    }
    if let Some(l) = &args.learners {
        cfg.learners = l.0.clone();
    }
    if let Some(o) = &args.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let cfg = resolve_run_config(&args)?;
    let summary = execute(&cfg, args.jobs)?;
    print!("{}", render_table(std::slice::from_ref(&summary)));
    println!("results written to {}", cfg.output.display());
    Ok(())
}

fn gen(args: GenArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        classes: args.classes,
        instances: args.instances,
        frames: args.frames,
        dim: args.dim,
        spread: args.spread,
        seed: args.seed,
    };
    let ds = gen_synthetic(&spec)?;
    write_dataset(&args.out, &ds)?;
    println!("wrote {} records to {}", ds.len(), args.out.display());
    Ok(())
}

fn import(args: ImportArgs) -> anyhow::Result<()> {
    let ds = import_csv(&args.input, args.classes)?;
    write_dataset(&args.out, &ds)?;
    println!(
        "wrote {} records ({} dims, {} classes) to {}",
        ds.len(),
        ds.dim,
        ds.num_classes,
        args.out.display()
    );
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let mut summaries = Vec::new();
    for path in &args.files {
        let found: Vec<_> = read_results(path)?
            .into_iter()
            .filter_map(|l| match l {
                ResultLine::Summary(s) => Some(s),
                _ => None,
            })
            .collect();
        if found.is_empty() {
            bail!("{} has no summary (incomplete run?)", path.display());
        }
        summaries.extend(found);
    }
    print!("{}", render_table(&summaries));
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::GenSynthetic(a) => gen(a),
        Command::ImportCsv(a) => import(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("5, 7").unwrap(), vec![5, 7]);
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn enum_flags_use_config_names() {
        assert_eq!(parse_enum::<OrderingKind>("class-iid").unwrap(), OrderingKind::ClassIid);
        assert_eq!(parse_enum::<ReplacementPolicy>("lawcbr").unwrap(), ReplacementPolicy::Lawcbr);
        assert_eq!(parse_enum::<SamplingStrategy>("uapn").unwrap(), SamplingStrategy::Uapn);
        assert!(parse_enum::<SamplingStrategy>("random").is_err());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run_cli(["ciosl", "run", "--bogus"]), 2);
        assert_eq!(run_cli(["ciosl", "run", "--ordering", "sideways", "--dataset", "x"]), 2);
        assert_eq!(run_cli(["ciosl"]), 2);
    }

    #[test]
    fn missing_inputs_exit_with_one() {
        assert_eq!(run_cli(["ciosl", "run"]), 1);
        assert_eq!(run_cli(["ciosl", "run", "--dataset", "/nonexistent/d.bin"]), 1);
    }
}
