mod commands;
mod options;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use giraffe_core::gradcheck::GradcheckError;
use giraffe_core::graph::GraphError;
use giraffe_core::tensor::TensorError;

use options::{Cli, Command, ConfigFile, InvalidInput, UsageError};

const EXIT_USAGE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<InvalidInput>()
            || cause.is::<GraphError>()
            || cause.is::<TensorError>()
            || cause.is::<GradcheckError>()
        {
            return EXIT_INVALID;
        }
    }
    EXIT_INTERNAL
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::Build(a) => commands::build(a, &cfg),
        Command::Analyze(a) => commands::analyze_cmd(a, &cfg),
        Command::Forward(a) => commands::forward(a, &cfg),
        Command::Gradcheck(a) => commands::gradcheck(a, &cfg),
        Command::Topo(a) => commands::topo(a, &cfg),
        Command::Family(a) => commands::family(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
