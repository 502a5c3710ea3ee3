//! `stemgen`: data synthesis, codec fitting, training, generation, editing,
//! evaluation and inspection.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod args;
mod commands;
mod run;

use std::process::ExitCode;

use clap::Parser;
use stemgen_core::Error;

use args::{Cli, Command};

/// Process exit codes, one per error category. Usage errors (unknown
/// flags, missing arguments) exit with clap's code 2.
pub mod exit {
    pub const INTERNAL: u8 = 1;
    pub const MISSING_FILE: u8 = 3;
    pub const LAYOUT_MISMATCH: u8 = 4;
    pub const BAD_FORMAT: u8 = 5;
    pub const INVALID_INPUT: u8 = 6;
    pub const DATASET: u8 = 7;
    pub const DIVERGED: u8 = 8;
    pub const IO: u8 = 9;
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => exit::MISSING_FILE,
        Error::Io(_) => exit::IO,
        Error::LayoutMismatch(_) => exit::LAYOUT_MISMATCH,
        Error::Format { .. } | Error::Json(_) => exit::BAD_FORMAT,
        Error::Dataset(_) => exit::DATASET,
        Error::NonFiniteLoss { .. } => exit::DIVERGED,
        Error::Layout(_)
        | Error::UnknownStem(_)
        | Error::StageOutOfRange { .. }
        | Error::InvalidGrid(_)
        | Error::MalformedDelay(_)
        | Error::DimensionMismatch { .. }
        | Error::InvalidArgument(_)
        | Error::InvalidPlan(_)
        | Error::SequenceTooLong { .. }
        | Error::UnknownCondition { .. }
        | Error::EmptyMask
        | Error::Config(_) => exit::INVALID_INPUT,
        #[allow(unreachable_patterns)]
        _ => exit::INTERNAL,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(run::LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::TrainCodec(a) => commands::train_codec(a),
        Command::TrainLm(a) => commands::train_lm(a),
        Command::Generate(a) => commands::generate_cmd(a),
        Command::Edit(a) => commands::edit_cmd(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stemgen {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
