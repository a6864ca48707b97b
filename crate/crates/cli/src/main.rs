//! Command-line driver.
//!
//! Subcommands: `gen-data` (synthetic benchmark), `augment` (amplitude-mixing
//! preview), `train`, `eval`, `ablate`. Every run resolves its configuration
//! (built-in defaults ← config file ← `--set key=value` overrides) and writes
//! the snapshot before doing work; all randomness flows from one `--seed`.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical abort.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hcdg", version, about = "Hierarchical-consistency domain generalization benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain benchmark dataset.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Benchmark definition JSON (defaults to the embedded benchmark_v1).
        #[arg(long)]
        benchmark: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Training samples per domain override.
        #[arg(long)]
        n_train: Option<usize>,
        /// Test samples per domain override.
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Amplitude-mix one image toward a counterpart and write PNGs.
    Augment {
        /// Source image (phase/structure preserved).
        #[arg(long)]
        src: PathBuf,
        /// Counterpart image (appearance donor).
        #[arg(long)]
        counterpart: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Mask mode: ag (Gaussian) or am (constant λ).
        #[arg(long, default_value = "ag")]
        mode: String,
        /// Fix σ instead of sampling it.
        #[arg(long)]
        sigma: Option<f64>,
        /// Fix the mask peak position (two scaled coordinates).
        #[arg(long, num_args = 2)]
        mu: Option<Vec<f64>>,
        /// Scaled half-extent of the mask grid.
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        /// Upper bound of σ when sampling.
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        /// Fix λ for am mode instead of sampling it.
        #[arg(long)]
        lambda: Option<f64>,
        /// Emit a σ ∈ {0.4, 0.5, 0.6, 0.7, 0.8} strip.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model on a dataset directory.
    Train {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for config.json, metrics.csv, losses.jsonl,
        /// checkpoints/ and report.md.
        #[arg(long)]
        out: PathBuf,
        /// Training config JSON layered over built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` overrides with dotted paths, e.g. flags.strong_aug=am.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Domain id to hold out from training.
        #[arg(long)]
        holdout: Option<usize>,
        /// Grid variant shorthand (baseline, a, b, c, d, e, hcdg).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training config of the checkpoint; defaults to config.json next to
        /// the checkpoints directory.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to one domain id (default: every domain separately).
        #[arg(long)]
        domain: Option<usize>,
        /// Evaluate the train split instead of the test split.
        #[arg(long)]
        train_split: bool,
        /// Evaluate the EMA teacher instead of the student.
        #[arg(long)]
        teacher: bool,
    },
    /// Run the ablation grid with leave-one-domain-out over all domains.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Comma-separated variants (default: the full grid).
        #[arg(long)]
        models: Option<String>,
    },
}

fn exit_code_for(err: &hcdg_core::Error) -> u8 {
    use hcdg_core::Error::*;
    match err {
        Config(_) | InvalidInput(_) | ShapeMismatch(_) => 2,
        Data(_) | Checkpoint(_) | Io(_) | Image(_) | Json(_) => 3,
        Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("HCDG_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if let Err(e) = hcdg_core::trainer::set_worker_threads(n) {
                eprintln!("warning: could not set worker threads: {e}");
            }
        }
    }
    let result = match cli.command {
        Command::GenData { out, benchmark, seed, n_train, n_test } => {
            commands::gen_data(&out, benchmark.as_deref(), seed, n_train, n_test)
        }
        Command::Augment { src, counterpart, out, mode, sigma, mu, t, eta, lambda, sweep, seed } => {
            commands::augment(commands::AugmentArgs {
                src,
                counterpart,
                out,
                mode,
                sigma,
                mu,
                t,
                eta,
                lambda,
                sweep,
                seed,
            })
        }
        Command::Train { data, out, config, overrides, seed, holdout, variant } => {
            commands::train(&data, &out, config.as_deref(), &overrides, seed, holdout, variant.as_deref())
        }
        Command::Eval { checkpoint, data, out, config, domain, train_split, teacher } => {
            commands::eval(
                &checkpoint,
                &data,
                &out,
                config.as_deref(),
                domain,
                train_split,
                teacher,
            )
        }
        Command::Ablate { data, out, config, overrides, seeds, models } => {
            commands::ablate(&data, &out, config.as_deref(), &overrides, &seeds, models.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
