use clap::Parser;

fn main() {
    let cli = seiznet_cli::Cli::parse();
    if let Err(e) = seiznet_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(seiznet_cli::exit_code(&e));
    }
}
