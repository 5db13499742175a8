use clap::Parser;

fn main() {
    let cli = emodiff::cli::Cli::parse();
    if let Err(e) = emodiff::cli::run(cli) {
        let msg = e.to_string();
        eprintln!("error: {}", msg.lines().next().unwrap_or("unknown failure"));
        std::process::exit(1);
    }
}
