use clap::Parser;
use paircausal::cli::{hint_for, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(&cli) {
        eprintln!("error: {error}");
        if let Some(hint) = hint_for(&error) {
            eprintln!("hint: {hint}");
        }
        std::process::exit(error.exit_code());
    }
}
