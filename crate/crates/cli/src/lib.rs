//! Command-line front end: `rdforge <command>`.
//!
//! Every command reads an optional JSON config, merges its flags on top,
//! validates the result as a whole and writes its artifacts, plus a copy
//! of the resolved config, under the output directory.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

pub use args::{Cli, Command};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Report(a) = &cli.command {
        print!("{}", commands::cmd_report(&a.path, a.csv)?);
        return Ok(());
    }
    let config = cli.resolve()?;
    match &cli.command {
        Command::Synth(_) => print_paths(&commands::cmd_synth(&config, cli.force)?),
        Command::TokenizerTrain(_) => print_paths(&commands::cmd_tokenizer_train(&config, cli.force)?),
        Command::Train(_) => print_paths(&commands::cmd_train(&config, cli.force)?),
        Command::Predict(_) => print_paths(&commands::cmd_predict(&config, cli.force)?),
        Command::Eval(a) => {
            let (shown, _) = commands::cmd_eval(&config, cli.force, a.csv)?;
            print!("{shown}");
        }
        Command::Stats(_) => {
            let (table, _) = commands::cmd_stats(&config, cli.force)?;
            print!("{table}");
        }
        Command::Report(_) => unreachable!("handled above"),
    }
    Ok(())
}
