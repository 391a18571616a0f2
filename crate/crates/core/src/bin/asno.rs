use std::path::PathBuf;
use std::process::ExitCode;

use asno::data::format::read_json;
use asno::experiment::{exit_code, run, ExperimentConfig, Problem, Scale, Subcommand};
use clap::Parser;

/// Dataset generation, training and evaluation for the attention-based neural operator.
#[derive(Parser, Debug)]
#[command(name = "asno", version)]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    #[arg(long, value_enum)]
    problem: Option<Problem>,
}

fn resolve(cli: &Cli) -> asno::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = cli.scale {
        cfg.scale = s;
    }
    if let Some(p) = cli.problem {
        cfg.problem = p;
    }
    Ok(cfg)
}

fn execute<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    let outcome = resolve(&cli).and_then(|cfg| {
        if let Some(w) = cfg.cost_warning() {
            eprintln!("{w}");
        }
        run(cli.command, &cfg)
    });
    match outcome {
        Ok(msg) => {
            println!("{}: {msg}", cli.command.name());
            0
        }
        Err(e) => {
            eprintln!("asno {}: {e}", cli.command.name());
            exit_code(&e) as u8
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(execute(std::env::args_os()))
}
