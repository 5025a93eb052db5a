use clap::Parser;
use odsim::cli::{execute, Cli, Command};

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => execute(args),
    };
    if let Err(e) = result {
        eprintln!("odsim: error: {e}");
        std::process::exit(1);
    }
}
