use clap::Parser;
use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_env("CRCE_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .init();
    let cli = crce_cli::cli::Cli::parse();
    std::process::exit(crce_cli::run(cli));
}
