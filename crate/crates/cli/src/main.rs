//! `pgket` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pgket::diagnostics::{kernel_selftest, oracle_check};
use pgket::experiment::{evaluate_checkpoint, noise_compare, run_experiment, ExperimentConfig, Split};
use pgket::Error;

#[derive(Parser)]
#[command(
    name = "pgket",
    version,
    about = "Photonic Gaussian-kernel transformer experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `data_dir` from the config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> pgket::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(dir) = &self.data_dir {
            cfg.data_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of the configured pipeline.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Check the photonic kernel invariants.
    KernelSelftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare coherent and Fock vacuum probabilities on random circuits.
    OracleCheck {
        #[arg(long, default_value_t = 2)]
        modes: usize,
        #[arg(long, default_value_t = 18)]
        cutoff: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Paired clean and noisy runs with a delta summary.
    NoiseCompare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        sigma: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

enum Failure {
    Lib(Error),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Validation(_) => 2,
        Error::Format { .. } | Error::Data(_) | Error::Io { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { run, out } => {
            let cfg = run.load()?;
            let outcome = run_experiment(&cfg, &out)?;
            print_json(&outcome.summary);
        }
        Command::Eval {
            run,
            checkpoint,
            split,
        } => {
            let cfg = run.load()?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let ev = evaluate_checkpoint(&cfg, &checkpoint, split)?;
            print_json(&serde_json::json!({ "loss": ev.loss, "accuracy": ev.accuracy }));
        }
        Command::KernelSelftest { seed } => {
            let checks = kernel_selftest(seed)?;
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Failure::Acceptance(format!("{failed} kernel checks failed")));
            }
        }
        Command::OracleCheck {
            modes,
            cutoff,
            trials,
            seed,
        } => {
            let report = oracle_check(modes, cutoff, trials, seed)?;
            print_json(&report);
            if !report.passed() {
                return Err(Failure::Acceptance(format!(
                    "{} of {} trials exceeded {:e}",
                    report.failures, report.trials, report.tolerance
                )));
            }
        }
        Command::NoiseCompare { run, out, sigma } => {
            let cfg = run.load()?;
            let cmp = noise_compare(&cfg, sigma, &out)?;
            print!("{}", cmp.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Acceptance(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(5)
        }
    }
}
