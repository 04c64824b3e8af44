use clap::Parser;

fn main() {
    let cli = ragdistill_cli::Cli::parse();
    if let Err(e) = ragdistill_cli::run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
