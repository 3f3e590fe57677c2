use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = refseg_cli::Cli::parse();
    match refseg_cli::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
