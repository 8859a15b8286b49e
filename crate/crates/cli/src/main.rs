use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loggate::corpus::{profile_corpus, ProfileInput, Split};
use loggate::pipeline::{self, RunConfig, SweepAxis, SynthSpec};

/// Log anomaly diagnosis with gated statistics/semantic fusion.
#[derive(Debug, Parser)]
#[command(name = "loggate", version)]
struct Cli {
    /// Root directory for run artifacts.
    #[arg(long, global = true, env = "LOGGATE_OUT", default_value = "runs")]
    out: PathBuf,

    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines). Defaults apply when
    /// omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print word-frequency statistics of a corpus file.
    Profile {
        path: PathBuf,
        /// Treat the file as a labeled corpus and profile only messages.
        #[arg(long)]
        labeled: bool,
    },
    /// Generate a synthetic labeled corpus and its manifest.
    Synth {
        /// Built-in spec: `standard` or `joint`.
        #[arg(long, default_value = "standard", conflicts_with = "spec")]
        preset: String,
        /// TOML spec file instead of a preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Corpus path; defaults to `<out>/corpus.tsv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build the per-word label-count dictionary from the train split.
    BuildStats(ConfigArgs),
    /// Pretrain the statistics autoencoder and cache embeddings.
    PretrainVae(ConfigArgs),
    /// Full training run with dev-set model selection and a test report.
    Train(ConfigArgs),
    /// Re-score a trained run directory.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory holding `model.ckpt`; defaults to `<out>`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Split to score: train, dev or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the full model and the stats-only, semantic-only and no-gate
    /// variants.
    Ablate(ConfigArgs),
    /// Train once per grid point along one axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// `epsilon` or `hidden_dim`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `0,0.1,0.2`.
        #[arg(long)]
        grid: String,
    },
}

enum Failure {
    Usage(String),
    Pipeline(loggate::Error),
}

impl From<loggate::Error> for Failure {
    fn from(e: loggate::Error) -> Self {
        Failure::Pipeline(e)
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    config
        .apply_overrides(&args.overrides)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn print_report(dir: &Path, report: &pipeline::MetricsReport) {
    println!("{}", report.summary());
    println!("artifacts: {}", dir.display());
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out = cli.out.as_path();
    match cli.command {
        Command::Profile { path, labeled } => {
            let input = if labeled { ProfileInput::Labeled } else { ProfileInput::Raw };
            print!("{}", profile_corpus(&path, input)?.to_report());
        }
        Command::Synth {
            preset,
            spec,
            seed,
            output,
        } => {
            let spec = match spec {
                Some(p) => SynthSpec::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
                None => SynthSpec::preset(&preset).map_err(|e| Failure::Usage(e.to_string()))?,
            };
            let path = output.unwrap_or_else(|| out.join("corpus.tsv"));
            let manifest = pipeline::write_synthetic(&spec, seed, &path)?;
            println!("wrote {} lines to {}", manifest.lines, path.display());
        }
        Command::BuildStats(args) => {
            let dict = pipeline::build_stats(&load_config(&args)?, Some(out))?;
            println!("{} words, hash {}", dict.len(), dict.content_hash());
            println!("artifacts: {}", out.display());
        }
        Command::PretrainVae(args) => {
            let prep = pipeline::pretrain_vae(&load_config(&args)?, Some(out))?;
            if let Some(v) = &prep.vnet {
                let first = v.loss_curve.first().copied().unwrap_or(f64::NAN);
                let last = v.loss_curve.last().copied().unwrap_or(f64::NAN);
                println!("vnet loss {first:.4} -> {last:.4}");
            }
            println!("artifacts: {}", out.display());
        }
        Command::Train(args) => {
            let outcome = pipeline::train(&load_config(&args)?, Some(out))?;
            print_report(out, &outcome.report);
        }
        Command::Evaluate { config, run, split } => {
            let config = load_config(&config)?;
            let split: Split = split.parse().map_err(|e: loggate::Error| Failure::Usage(e.to_string()))?;
            let run_dir = run.unwrap_or_else(|| out.to_path_buf());
            let report = pipeline::evaluate(&run_dir, &config, split)?;
            let dir = run_dir.join(format!("eval_{}", split.as_str()));
            report.write(&dir)?;
            print_report(&dir, &report);
        }
        Command::Ablate(args) => {
            let results = pipeline::run_ablation(&load_config(&args)?, Some(out))?;
            for (mode, o) in &results {
                println!("{:<14} macro-F1 {:.4}", mode.as_str(), o.report.macro_f1);
            }
            println!("artifacts: {}", out.display());
        }
        Command::Sweep { config, axis, grid } => {
            let config = load_config(&config)?;
            let axis: SweepAxis = axis.parse().map_err(|e: loggate::Error| Failure::Usage(e.to_string()))?;
            let grid = pipeline::parse_grid(&grid).map_err(|e| Failure::Usage(e.to_string()))?;
            let results = pipeline::run_sweep(&config, axis, &grid, Some(out))?;
            for (v, o) in &results {
                println!("{}={v:<8} macro-F1 {:.4}", axis.as_str(), o.report.macro_f1);
            }
            println!("artifacts: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
