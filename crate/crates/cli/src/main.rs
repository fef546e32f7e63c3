use clap::Parser;
use polab_cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = polab_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
