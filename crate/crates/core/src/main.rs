use clap::Parser;

fn main() {
    let cli = loco_admm::cli::Cli::parse();
    std::process::exit(loco_admm::cli::run(cli));
}
