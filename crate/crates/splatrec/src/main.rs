use clap::Parser;

fn main() {
    env_logger::init();
    let cli = splatrec::cli::Cli::parse();
    std::process::exit(splatrec::cli::run(cli));
}
