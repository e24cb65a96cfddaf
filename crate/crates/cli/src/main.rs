use clap::Parser;

fn main() {
    let cli = cetsim::Cli::parse();
    std::process::exit(cetsim::run(cli));
}
