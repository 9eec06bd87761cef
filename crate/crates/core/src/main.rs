use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = scent::cli::Cli::parse();
    match scent::cli::execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scent: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
