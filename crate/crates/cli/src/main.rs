//! `dlmuq`: score denoising traces, evaluate scores, run the simulator.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Metric;

#[derive(Parser, Debug)]
#[command(name = "dlmuq", version, args_override_self = true, about = "Uncertainty scores for masked diffusion language models")]
struct Cli {
    /// Strict JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute uncertainty reports for trace files.
    Score(ScoreArgs),
    /// Join reports with qualities and compute PRR / ROC-AUC.
    Eval(EvalArgs),
    /// Generate simulator traces and check the dissimilarity bound.
    Simulate(SimulateArgs),
    /// Check trace files for structural violations.
    Validate(ValidateArgs),
    /// Merge metric files into one signal × dataset CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Trace files (JSONL, optionally gzip-compressed).
    pub traces: Vec<PathBuf>,
    /// Comma-separated signal names.
    #[arg(long)]
    pub signals: Option<String>,
    #[arg(long, value_parser = parse_kind)]
    pub provider: Option<dlmuq_core::ProviderKind>,
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Report file; defaults to `<output_dir>/reports.jsonl` or stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Stop at the first failed instance.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Uncertainty report files.
    #[arg(long = "reports", num_args = 1..)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub qualities: Option<PathBuf>,
    #[arg(long)]
    pub signals: Option<String>,
    #[arg(long, value_enum)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub preset: Option<dlmuq_core::eval::TaskPreset>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_reject: Option<f64>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// `uniform` or `dirichlet:<alpha>`.
    #[arg(long)]
    pub dist: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `random_order` or `confidence_order`.
    #[arg(long)]
    pub unmask_policy: Option<String>,
    /// `sample` or `greedy`.
    #[arg(long)]
    pub decode: Option<String>,
    #[arg(long)]
    pub confidence_threshold: Option<f64>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub n_traces: Option<usize>,
    #[arg(long)]
    pub theorem_samples: Option<usize>,
    /// `exact_discretized` or `monte_carlo`.
    #[arg(long)]
    pub loss_mode: Option<String>,
    /// Output directory for `traces.jsonl` and `theorem.json`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Compress the trace file.
    #[arg(long)]
    pub gzip: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Metric JSON files or directories holding them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Which metric to tabulate.
    #[arg(long, default_value = "prr")]
    pub metric: String,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<dlmuq_core::ProviderKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown provider '{s}'"))
}

/// Outcome of a command that ran to completion.
pub enum Status {
    Ok,
    /// Finished, but some instances failed or were invalid.
    Partial,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    cfg.apply_env();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        anyhow::ensure!(j > 0, "--jobs must be positive");
        pool = pool.num_threads(j);
    }
    let pool = pool.build()?;
    pool.install(|| match cli.command {
        Command::Score(a) => commands::score(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Simulate(a) => commands::simulate(cfg, a),
        Command::Validate(a) => commands::validate(a),
        Command::Report(a) => commands::report(a),
    })
}
