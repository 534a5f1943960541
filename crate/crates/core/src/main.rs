use clap::Parser;

fn main() {
    let cli = invcoss::cli::Cli::parse();
    if let Err(e) = invcoss::cli::run(cli) {
        eprintln!("invcoss: {e}");
        std::process::exit(e.exit_code());
    }
}
