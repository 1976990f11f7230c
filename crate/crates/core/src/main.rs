use clap::error::ErrorKind;
use clap::Parser;

use sdgm::cli::{execute, Cli, EXIT_CONFIG, EXIT_OK};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match execute(cli, &mut std::io::stdout().lock()) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    };
    std::process::exit(code);
}
