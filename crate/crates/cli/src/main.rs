use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = occ_cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match occ_cli::run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
