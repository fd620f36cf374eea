use clap::Parser;
use rsoc::harness::{run, Cli};

fn main() {
    std::process::exit(run(&Cli::parse()));
}
