use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = psonet_cli::Cli::parse();
    if let Err(err) = psonet_cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(psonet_cli::exit_code(&err));
    }
}
