use clap::Parser;

fn main() {
    let cli = ebipla::cli::Cli::parse();
    std::process::exit(ebipla::cli::run_cli(cli));
}
