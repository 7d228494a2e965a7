use clap::Parser;
use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::default().filter_or("PITA_LAB_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = pita_lab::cli::Cli::parse();
    std::process::exit(pita_lab::cli::run(cli));
}
