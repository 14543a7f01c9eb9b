use clap::Parser;

fn main() {
    let cli = fcl_cli::Cli::parse();
    if let Err(err) = fcl_cli::execute(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
