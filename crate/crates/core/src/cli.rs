//! Command-line front end. Every subcommand reads one TOML config and writes
//! its outputs under `--out`.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};
use crate::datamodel::{read_dataset, write_dataset};
use crate::diversity::{self, DiversityRow};
use crate::pipeline::{self, Metrics, RunReport};
use crate::verify::{self, Fault};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const METRICS_HEADER: &str = "condition,accuracy,precision,recall,f1";

#[derive(Debug, Parser)]
#[command(name = "synthcurate", version, about = "Synthetic cross-modal view generation and curation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InjectFault {
    AttentionKeySign,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the train and test splits of the configured benchmark.
    GenBenchmark,
    /// Generation, selection rounds, student training and evaluation.
    Run,
    /// The six-condition ablation over several seeds.
    Ablate,
    /// Run the invariant suite.
    Verify {
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<InjectFault>,
    },
    /// Stage-wise generalized variance of a run's synthetic views.
    Diversity,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
    #[error("{failed} of {total} checks failed")]
    Verification { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
            Self::Verification { .. } => EXIT_VERIFY,
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let workers = cli.common.workers.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Command::Verify { inject_fault } = &cli.command {
        let fault = match inject_fault {
            Some(InjectFault::AttentionKeySign) => Fault::AttentionKeySign,
            None => Fault::None,
        };
        return cmd_verify(cli.common.seed.unwrap_or(0), fault, &cli.common.out);
    }
    let cfg = load_config(&cli.common)?;
    fs::create_dir_all(&cli.common.out).with_context(|| format!("creating {}", cli.common.out.display()))?;
    match cli.command {
        Command::GenBenchmark => cmd_gen_benchmark(&cfg, &cli.common.out),
        Command::Run => cmd_run(&cfg, &cli.common.out),
        Command::Ablate => cmd_ablate(&cfg, &cli.common.out),
        Command::Diversity => cmd_diversity(&cfg, &cli.common.out),
        Command::Verify { .. } => unreachable!(),
    }
}

pub fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report serializes") + "\n"
}

pub fn metrics_row(condition: &str, m: &Metrics) -> String {
    format!("{condition},{:.6},{:.6},{:.6},{:.6}", m.accuracy, m.precision, m.recall, m.f1)
}

pub fn cmd_gen_benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let bench = cfg.benchmark_with_seed(cfg.seed()?)?;
    for (name, split) in [("train.jsonl", &bench.train), ("test.jsonl", &bench.test)] {
        let path = out.join(name);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_dataset(split, &bench.schema, std::io::BufWriter::new(file)).context("writing dataset")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    report: &'a RunReport,
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let seed = cfg.seed()?;
    let bench = cfg.benchmark_with_seed(seed)?;
    let pcfg = cfg.pipeline_config()?;
    let run = pipeline::run_pipeline(&bench, &pcfg, "run", &cfg.diversity.grid()).context("pipeline failed")?;
    let record = ReportRecord { config_hash: cfg.hash(), seed, report: &run.report };
    write(&out.join("report.json"), &json_line(&record))?;
    write(&out.join("metrics.csv"), &format!("{METRICS_HEADER}\n{}\n", metrics_row("run", &run.report.metrics)))?;
    let path = out.join("dataset.jsonl");
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_dataset(&run.dataset, &bench.schema, std::io::BufWriter::new(file)).context("writing dataset")?;
    eprintln!("run finished in {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

/// Per-seed rows followed by one mean row per condition.
pub fn ablation_table(rows: &[(u64, RunReport)], conditions: &[String]) -> String {
    let mut s = format!("seed,{METRICS_HEADER}\n");
    for (seed, r) in rows {
        let _ = writeln!(s, "{seed},{}", metrics_row(&r.condition, &r.metrics));
    }
    for c in conditions {
        let ms: Vec<&Metrics> = rows.iter().filter(|(_, r)| &r.condition == c).map(|(_, r)| &r.metrics).collect();
        let n = ms.len().max(1) as f64;
        let mean = |f: fn(&Metrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / n;
        let m = Metrics {
            accuracy: mean(|m| m.accuracy),
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        };
        let _ = writeln!(s, "mean,{}", metrics_row(c, &m));
    }
    s
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let base_seed = cfg.seed()?;
    let conditions = &cfg.ablation.conditions;
    let mut rows = Vec::new();
    let mut reports = String::new();
    for i in 0..cfg.ablation.seeds as u64 {
        let seed = base_seed + i;
        let bench = cfg.benchmark_with_seed(seed)?;
        let base = cfg.pipeline_config_with_seed(seed)?;
        for r in pipeline::run_ablation(&bench, &base, conditions).context("ablation failed")? {
            reports.push_str(&json_line(&ReportRecord { config_hash: cfg.hash(), seed, report: &r }));
            rows.push((seed, r));
        }
    }
    write(&out.join("ablation.csv"), &ablation_table(&rows, conditions))?;
    write(&out.join("ablation_reports.jsonl"), &reports)?;
    Ok(())
}

/// Wide table: one row per `(d_pca, components)`, one column per stage.
pub fn diversity_table(rows: &[DiversityRow]) -> String {
    let mut stages: Vec<&str> = Vec::new();
    for r in rows {
        if !stages.contains(&r.stage.as_str()) {
            stages.push(&r.stage);
        }
    }
    let mut s = format!("d_pca,components,{}\n", stages.join(","));
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.d_pca, r.n_components)) {
            keys.push((r.d_pca, r.n_components));
        }
    }
    for (d, n) in keys {
        let cells: Vec<String> = stages
            .iter()
            .map(|st| {
                rows.iter()
                    .find(|r| r.d_pca == d && r.n_components == n && r.stage == *st)
                    .map(|r| format!("{:.6e}", r.generalized_variance))
                    .unwrap_or_default()
            })
            .collect();
        let _ = writeln!(s, "{d},{n},{}", cells.join(","));
    }
    s
}

pub fn cmd_diversity(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let rounds = cfg.pipeline.rounds;
    let (dataset, schema) = match &cfg.diversity.dataset {
        Some(path) => {
            let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            read_dataset(BufReader::new(f)).context("reading dataset")?
        }
        None => {
            let bench = cfg.benchmark_with_seed(seed)?;
            let mut ds = bench.train.clone();
            pipeline::run_selection_rounds(&mut ds, &bench, &cfg.pipeline_config()?).context("pipeline failed")?;
            (ds, bench.schema)
        }
    };
    let stages = diversity::dataset_stages(&dataset, &schema, rounds);
    let mut rows = Vec::new();
    for (d, n) in cfg.diversity.grid() {
        rows.extend(diversity::diversity_report(&stages, d, n, seed).context("diversity analysis failed")?);
    }
    write(&out.join("diversity.csv"), &diversity_table(&rows))?;
    write(&out.join("diversity.json"), &json_line(&serde_json::json!({ "config_hash": cfg.hash(), "rows": rows })))?;
    Ok(())
}

pub fn cmd_verify(seed: u64, fault: Fault, out: &Path) -> Result<(), CliError> {
    let records = verify::run_all(seed, fault);
    let mut lines = String::new();
    for r in &records {
        let line = json_line(r);
        print!("{line}");
        lines.push_str(&line);
    }
    if fs::create_dir_all(out).is_ok() {
        write(&out.join("verify.jsonl"), &lines)?;
    }
    let failed = records.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::Verification { failed, total: records.len() });
    }
    Ok(())
}
