use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedids::experiment::{run_experiment, ExperimentConfig};
use fedids::Error;

#[derive(Parser)]
#[command(name = "fedids", version, about = "Federated autoencoder + classifier IDS experiments")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Output root; defaults to the config's output_dir, then `runs`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(short, long)]
        seed: Option<u64>,
    },
    /// Check a config and list every violation.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
    },
}

const VALIDATION_FAILURE: u8 = 1;
const RUNTIME_FAILURE: u8 = 2;

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            Error::Parse(_) => ExitCode::from(VALIDATION_FAILURE),
            _ => ExitCode::from(RUNTIME_FAILURE),
        }
    })
}

fn report_violations(v: &[String]) -> ExitCode {
    for line in v {
        eprintln!("violation: {line}");
    }
    ExitCode::from(VALIDATION_FAILURE)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Validate { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let v = cfg.violations();
            if v.is_empty() {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            } else {
                report_violations(&v)
            }
        }
        Command::Run { config, out, seed } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let v = cfg.violations();
            if !v.is_empty() {
                return report_violations(&v);
            }
            let root = out
                .or_else(|| cfg.output_dir.as_ref().map(|p| cfg.base_dir.join(p)))
                .unwrap_or_else(|| PathBuf::from("runs"));
            match run_experiment(&cfg, seed, Some(&root)) {
                Ok(o) => {
                    print!("{}", fedids::experiment::render_text(&o.report));
                    if let Some(dir) = o.output_dir {
                        println!("artifacts: {}", dir.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(RUNTIME_FAILURE)
                }
            }
        }
    }
}
