use clap::Parser;
use trajguide_cli::{dispatch, Cli};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let code = match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("trajguide: {e}");
            e.code
        }
    };
    std::process::exit(code);
}
