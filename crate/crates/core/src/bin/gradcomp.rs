use clap::Parser;
use gradcomp::cli::{run, Cli};

fn main() {
    std::process::exit(run(&Cli::parse()));
}
