use clap::Parser;
use timebin_cli::commands::{run, Cli};
use timebin_cli::exit_code;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
