use std::process::ExitCode;

use clap::Parser;
use dualrefine_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    // clap exits with status 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse_from(&argv);
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
