use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use trio_cli::{run, Cli, CliError, Output};

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("TRIO_LOG").unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Config(e.render().to_string().trim().to_string())),
    };
    let text = match run(cli) {
        Ok(Output::Json(v)) => {
            serde_json::to_string_pretty(&v).expect("json values serialize") + "\n"
        }
        Ok(Output::Text(t)) => t,
        Err(e) => return fail(&e),
    };
    // A closed pipe (e.g. `| head`) is not a failure of the command itself.
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
    ExitCode::SUCCESS
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::to_string(&e.report()).expect("error reports serialize")
    );
    ExitCode::from(e.exit_code() as u8)
}
