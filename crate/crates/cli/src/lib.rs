//! Command-line front end: simulation, fitting, prediction, evaluation,
//! model selection and reconstruction with CSV and JSON files.

pub mod commands;
pub mod io;

pub use commands::{exit_code, run, Cli, SavedModel};

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    run(Cli::try_parse_from(args)?)
}
