use clap::Parser;

fn main() {
    let cli = bgch::cli::Cli::parse();
    bgch::init_logging();
    if let Err(err) = bgch::cli::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
