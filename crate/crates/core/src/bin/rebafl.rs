use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rebafl::config::{ExperimentConfig, Precision};
use rebafl::experiment::{data_root, run_experiment, run_sweep, RunSummary, SweepParam};
use rebafl::federation::StrategyKind;
use rebafl::gradcheck::{gradcheck_with_tolerance, GradLoss, GradModel, DEFAULT_TOLERANCE};
use rebafl::{Error, Result};

/// Federated-learning simulator for label-skewed clients with dropout.
///
/// Datasets are read from $REBAFL_DATA_DIR (default ./data).
#[derive(Parser)]
#[command(name = "rebafl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the strategy (fedavg, fedprox, bsm_fedavg, rebafl).
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// Override the arithmetic precision (f32 or f64).
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// mlp or cnn
        #[arg(long, default_value = "mlp")]
        model: GradModel,
        /// ce, rbsm, rebafl or fedprox
        #[arg(long, default_value = "ce")]
        loss: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smoothing for rbsm and rebafl (default 0.01).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Augmentation weight for rebafl or proximal weight for fedprox (default 0.1).
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Perturb the analytic gradient; the check must then fail.
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Run a config once per value of one hyperparameter.
    Sweep {
        config: PathBuf,
        /// p, E, epsilon, mu, s or m
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Run values concurrently (results are identical).
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
    }
}

fn load(path: &PathBuf, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(r) = o.rounds {
        cfg.rounds = r;
    }
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = o.strategy {
        cfg.strategy.name = s;
    }
    if let Some(p) = o.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn print_summary(s: &RunSummary) {
    println!("rounds: {} ({} skipped)", s.rounds, s.skipped_rounds);
    println!("final accuracy: {}", fmt_opt(s.final_accuracy));
    println!(
        "last {} rounds: mean {} std {} diversity {}",
        s.window,
        fmt_opt(s.window_mean),
        fmt_opt(s.window_std),
        s.window_diversity.map_or_else(|| "n/a".into(), |v| format!("{v:.4e}"))
    );
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            overrides,
            resume,
        } => {
            let cfg = load(&config, &overrides)?;
            let summary = run_experiment(&cfg, &data_root(), resume.as_deref())?;
            print_summary(&summary);
            println!("outputs: {}", cfg.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            model,
            loss,
            seed,
            epsilon,
            mu,
            tolerance,
            corrupt_gradient,
        } => {
            let loss = GradLoss::parse(&loss, epsilon, mu)?;
            let report = gradcheck_with_tolerance(model, loss, seed, corrupt_gradient, tolerance)?;
            println!("{report}");
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Sweep {
            config,
            param,
            values,
            parallel,
            overrides,
        } => {
            let cfg = load(&config, &overrides)?;
            let summaries = run_sweep(&cfg, &data_root(), param, &values, parallel)?;
            for (v, s) in values.iter().zip(&summaries) {
                println!(
                    "{param}={v} seed={} final={} mean={} std={}",
                    s.seed,
                    fmt_opt(s.final_accuracy),
                    fmt_opt(s.window_mean),
                    fmt_opt(s.window_std)
                );
            }
            println!("summary: {}", cfg.output_dir.join("summary.csv").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
