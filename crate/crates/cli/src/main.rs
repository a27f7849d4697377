use clap::Parser;

fn main() {
    // silent unless RUST_LOG asks for output
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("off")).init();
    let cli = lidnet_cli::Cli::parse();
    if let Err(e) = lidnet_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
