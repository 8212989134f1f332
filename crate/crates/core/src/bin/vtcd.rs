use clap::Parser;

fn main() {
    let cli = vtcd::cli::Cli::parse();
    if let Err(e) = vtcd::cli::run(cli) {
        eprintln!("vtcd: {e}");
        std::process::exit(vtcd::cli::exit_code(&e));
    }
}
