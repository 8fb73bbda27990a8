mod commands;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = commands::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .filter_map(|c| c.downcast_ref::<vco::Error>())
                .any(vco::Error::is_validation)
                || e.chain().any(|c| c.downcast_ref::<commands::UsageError>().is_some());
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
