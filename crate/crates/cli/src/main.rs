//! `ibgc`: train, evaluate and probe generative classifiers from the shell.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser, Debug)]
#[command(name = "ibgc", version, about = "Generative classifiers with an information-bottleneck objective")]
struct Cli {
    /// Seed for every random stream (overrides the config seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    SynthData(SynthArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Accuracy, bits/dim and calibration summary on a dataset.
    Eval(EvalArgs),
    /// Out-of-distribution test and ROC-AUC.
    Ood(OodArgs),
    /// Targeted attacks on dataset images.
    Attack(AttackArgs),
    /// Decision-space projection, class similarities and heatmaps for one image.
    Explain(ExplainArgs),
    /// Reliability curve and calibration errors.
    Calibrate(CalibrateArgs),
    /// Effective receptive field of the last feature maps.
    Rf(RfArgs),
    /// Robustness to synthetic corruptions.
    Corrupt(CorruptArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: cannot start {} worker threads", n);
            return ExitCode::from(1);
        }
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a),
        Command::Ood(a) => ood(a),
        Command::Attack(a) => attack(a, seed),
        Command::Explain(a) => explain(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Rf(a) => rf(a),
        Command::Corrupt(a) => corrupt(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
