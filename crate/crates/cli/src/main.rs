use clap::Parser;

fn main() {
    let cli = tinydrop_cli::Cli::parse();
    if let Err(e) = tinydrop_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
