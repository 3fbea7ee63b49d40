use clap::Parser;

fn main() {
    std::process::exit(muninn::cli::run(muninn::cli::Cli::parse()));
}
