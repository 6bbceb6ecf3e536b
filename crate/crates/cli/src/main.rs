use clap::Parser;

fn main() {
    let cli = poselab_cli::Cli::parse();
    if let Err(e) = poselab_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
