use clap::Parser;

fn main() {
    let cli = gain_lab::Cli::parse();
    if let Err(e) = gain_lab::run(cli) {
        eprintln!("gain-lab: {e}");
        std::process::exit(e.exit_code());
    }
}
