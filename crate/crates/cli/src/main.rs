use clap::Parser;

fn main() {
    let cli = gtring_cli::Cli::parse();
    std::process::exit(gtring_cli::execute(cli));
}
