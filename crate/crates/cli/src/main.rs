use clap::Parser;
use dikw_cli::cli::{execute, Cli};
use dikw_cli::error::exit;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("DIKW_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let json = cli.json;
    let code = match execute(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            if json {
                eprintln!("{}", serde_json::to_string(&e).expect("error serializes"));
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    };
    std::process::exit(code);
}
