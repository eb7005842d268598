use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clipfilter_core::fixtures::{load_fixture, save_fixture, synthesize, SynthSpec};
use clipfilter_core::loss::LossWeights;
use clipfilter_core::params::InitMode;
use clipfilter_core::pipeline::{
    cmd_run, cmd_sweep_iters, cmd_train, to_pretty_json, RunConfig, SWEEP_GRID,
};
use clipfilter_core::rfm::FusionMode;
use clipfilter_core::Error;

#[derive(Parser)]
#[command(name = "clipfilter", version, about = "Word-highlighting clip filtering on feature fixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the forward pipeline and print or write the report.
    Run(RunArgs),
    /// Plain gradient descent on the alignment loss.
    Train(RunArgs),
    /// One run per filtering iteration count.
    SweepIters {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated iteration counts.
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_GRID)]
        grid: Vec<usize>,
    },
    /// Check a fixture file against the schema and its invariants.
    Validate {
        #[arg(long)]
        fixture: PathBuf,
    },
    /// Write a synthetic fixture.
    Synthesize(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Learned,
    Average,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Identity,
    Random,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    fixture: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Filtering iterations N.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = Fusion::Learned)]
    fusion: Fusion,
    #[arg(long, value_enum, default_value_t = Init::Identity)]
    init: Init,
    #[arg(long, default_value_t = 0.3)]
    lambda_qv: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_qc: f64,
    #[arg(long, default_value_t = 1.5)]
    lambda_cc: f64,
    /// Training steps.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Training learning rate.
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    lr: f64,
    /// Report destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            fixture_path: Some(self.fixture.clone()),
            seed: self.seed,
            iterations: self.iters,
            fusion: match self.fusion {
                Fusion::Learned => FusionMode::Learned,
                Fusion::Average => FusionMode::Average,
            },
            weights: LossWeights {
                lambda_qv: self.lambda_qv,
                lambda_qc: self.lambda_qc,
                lambda_cc: self.lambda_cc,
            },
            init: match self.init {
                Init::Identity => InitMode::Identity,
                Init::Random => InitMode::Random,
            },
            train_steps: self.steps,
            learning_rate: self.lr,
            output_path: self.out.clone(),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Query words L_q.
    #[arg(long, default_value_t = 4)]
    words: usize,
    /// Clips per video L_v.
    #[arg(long, default_value_t = 6)]
    clips: usize,
    /// Caption tokens per clip L_c.
    #[arg(long, default_value_t = 2)]
    caption_len: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0.9)]
    alignment: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Fixture { .. } | Error::Parse(_) | Error::Io(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn print_or_skip<T: serde::Serialize>(value: &T, out: &Option<PathBuf>) -> clipfilter_core::Result<()> {
    if out.is_none() {
        print!("{}", to_pretty_json(value)?);
    }
    Ok(())
}

fn execute(command: Command) -> clipfilter_core::Result<()> {
    let start = Instant::now();
    match command {
        Command::Run(args) => {
            let report = cmd_run(&args.config())?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print_or_skip(&report, &args.out)?;
        }
        Command::Train(args) => {
            let report = cmd_train(&args.config())?;
            let first = report.loss_history[0];
            let last = *report.loss_history.last().unwrap_or(&first);
            let matched = report.matched_top1.iter().filter(|&&m| m).count();
            eprintln!(
                "l_ma {first:.6} -> {last:.6} over {} steps; matched pairs {matched}/{}",
                report.loss_history.len() - 1,
                report.matched_top1.len()
            );
            print_or_skip(&report, &args.out)?;
        }
        Command::SweepIters { run, grid } => {
            let report = cmd_sweep_iters(&run.config(), &grid)?;
            print!("{}", report.table());
        }
        Command::Validate { fixture } => {
            let batch = load_fixture(&fixture)?;
            println!("{}: ok, {} samples, d = {}", fixture.display(), batch.len(), batch.dim);
        }
        Command::Synthesize(a) => {
            let batch = synthesize(&SynthSpec {
                seed: a.seed,
                batch: a.batch,
                words: a.words,
                clips: a.clips,
                caption_len: a.caption_len,
                dim: a.dim,
                alignment: a.alignment,
            })?;
            match &a.out {
                Some(path) => save_fixture(&batch, path)?,
                None => println!("{}", clipfilter_core::fixtures::fixture_to_string(&batch)?),
            }
        }
    }
    eprintln!("wall time {:.3}s", start.elapsed().as_secs_f64());
    Ok(())
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
