use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;
use rbcsmooth_cli::{configure_threads, dispatch, error_line, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = configure_threads().and_then(|_| dispatch(&cli, &mut out));
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(name, &e));
            ExitCode::from(2)
        }
    }
}
