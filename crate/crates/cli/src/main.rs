//! `sarcd`: radar depth enhancement from the command line.
//!
//! Every stage reads and writes files (RDM depth maps, CSV, JSON), so each
//! intermediate can be inspected or fed to a later stage on its own.
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod cmd;
mod failure;
mod io;
mod pipeline;
mod plot;

use std::process::ExitCode;

use clap::Parser;

use failure::Failure;

fn main() -> ExitCode {
    let cli = match cmd::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match cmd::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}

fn report(f: &Failure) -> ExitCode {
    eprintln!("error: {f}");
    f.exit_code()
}
