use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MLC_LOG", "warn")).init();
    let cli = mlc_cli::Cli::parse();
    if let Err(e) = mlc_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
