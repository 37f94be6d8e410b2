use std::process::ExitCode;

use clap::Parser;
use velopref_cli::{execute, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok((m, manifest)) => {
            println!("{}", serde_json::json!({ "stage": m.stage, "manifest": manifest, "outputs": m.outputs.len() }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
