use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentfed_cli::{parse_config, run};

#[derive(Parser)]
#[command(name = "latentfed", version, about = "Federated personalization with latent-space resampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a cross-validated experiment and write metrics CSVs.
    Run {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of folds (overrides the config).
        #[arg(long)]
        folds: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Command::Run {
        config,
        output,
        seed,
        folds,
    } = Cli::parse().command;
    let result = parse_config(&config).and_then(|mut cfg| {
        if let Some(o) = output {
            cfg.output_dir = o;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(f) = folds {
            cfg.num_folds = f;
        }
        let base = config.parent().map(PathBuf::from).unwrap_or_default();
        run(&cfg, &base)
    });
    match result {
        Ok((_, files)) => {
            log::info!("wrote {}", files.metrics.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
