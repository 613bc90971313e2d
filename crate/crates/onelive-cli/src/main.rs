//! Pipeline entry point.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 missing upstream
//! artifacts, 4 runtime invariant violations and I/O failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use onelive::config::PipelineConfig;
use onelive::pipeline::{render_report, run_all, run_stage, Paths};
use onelive::Error;

#[derive(Parser)]
#[command(
    name = "onelive",
    about = "Generative live-streaming recommendation pipeline on a synthetic world",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and export its dataset.
    Simulate(RunArgs),
    /// Train the two-tower alignment model on click pairs.
    TrainTokenizer(RunArgs),
    /// Fit the residual codebook and write the semantic-id timeline.
    Quantize(RunArgs),
    /// Train the decoder-only generator with the weighted MTP objective.
    TrainGenerator(RunArgs),
    /// Train the reward model and run reinforcement alignment.
    Align(RunArgs),
    /// Beam-search the test queries and write ranked live authors.
    Infer(RunArgs),
    /// Compute retrieval, codebook, and reward metrics.
    Eval(RunArgs),
    /// Benchmark the standard and MTP decode paths.
    Bench(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Print the metric summary (optionally with deltas against a baseline).
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; omit to use built-in defaults (requires --seed).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Artifact root; defaults to $ONELIVE_DATA_DIR, then ./data.
    #[arg(long)]
    data_dir: Option<PathBuf>,

    /// Override the pipeline seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Dotted config overrides, e.g. world.num_users=200.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Artifact root; defaults to $ONELIVE_DATA_DIR, then ./data.
    #[arg(long)]
    data_dir: Option<PathBuf>,

    /// Baseline artifact root for delta reporting.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

fn data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("ONELIVE_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::from_file(path, &args.overrides)?,
        None => {
            let seed = args
                .seed
                .ok_or_else(|| Error::Config("either --config or --seed must be given".into()))?;
            let base = PipelineConfig::with_seed(seed).to_toml();
            PipelineConfig::from_toml(&base, &args.overrides)?
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Parse { context, .. } if context == "config" => 2,
        Error::MissingArtifact(_) => 3,
        _ => 4,
    }
}

fn run(stage: &str, args: &RunArgs) -> Result<(), Error> {
    let cfg = load_config(args)?;
    let paths = Paths::new(data_dir(args.data_dir.clone()));
    let started = std::time::Instant::now();
    if stage == "all" {
        run_all(&cfg, &paths)?;
    } else {
        run_stage(stage, &cfg, &paths)?;
    }
    eprintln!(
        "{stage}: done in {:.1}s ({})",
        started.elapsed().as_secs_f64(),
        paths.root.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(a) => run("simulate", a),
        Command::TrainTokenizer(a) => run("train-tokenizer", a),
        Command::Quantize(a) => run("quantize", a),
        Command::TrainGenerator(a) => run("train-generator", a),
        Command::Align(a) => run("align", a),
        Command::Infer(a) => run("infer", a),
        Command::Eval(a) => run("eval", a),
        Command::Bench(a) => run("bench", a),
        Command::All(a) => run("all", a),
        Command::Report(a) => {
            let paths = Paths::new(data_dir(a.data_dir.clone()));
            let baseline = a.baseline.as_ref().map(|b| Paths::new(b.clone()));
            render_report(&paths, baseline.as_ref()).map(|text| print!("{text}"))
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
