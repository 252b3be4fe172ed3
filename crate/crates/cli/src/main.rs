use clap::Parser;

fn main() {
    let cli = arlab_cli::Cli::parse();
    if let Err(e) = arlab_cli::run(&cli) {
        eprintln!("arlab: {e}");
        std::process::exit(e.exit_code());
    }
}
