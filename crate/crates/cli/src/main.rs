mod eval;
mod run;
mod tools;
mod train;
mod translate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Non-autoregressive translation with a flow prior over latent sequences.
#[derive(Parser)]
#[command(name = "flowseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a FlowSeq or autoregressive model into a run directory.
    Train(train::TrainArgs),
    /// Translate a file with a trained run.
    Translate(translate::TranslateArgs),
    /// Corpus BLEU of a hypothesis file against one or more references.
    Score(eval::ScoreArgs),
    /// Pairwise and leave-one-out BLEU of multi-hypothesis output.
    Diversity(eval::DiversityArgs),
    /// Decoding latency by batch size and target-length bucket.
    Bench(eval::BenchArgs),
    /// Run the verification oracles.
    Selftest(tools::SelftestArgs),
    /// Average checkpoints element-wise.
    AvgCheckpoints(tools::AvgArgs),
    /// Re-translate a source file with an autoregressive teacher.
    Distill(tools::DistillArgs),
}

/// Failure classes mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Verification(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Verification(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Verification(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<flowseq_core::Error> for Failure {
    fn from(e: flowseq_core::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Translate(a) => translate::run(a),
        Command::Score(a) => eval::score(a),
        Command::Diversity(a) => eval::diversity(a),
        Command::Bench(a) => eval::bench(a),
        Command::Selftest(a) => tools::selftest(a),
        Command::AvgCheckpoints(a) => tools::avg_checkpoints(a),
        Command::Distill(a) => tools::distill(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
