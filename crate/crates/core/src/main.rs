use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adaptive_kernel::experiment::{execute, plan, ExperimentConfig, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "adaptive-kernel", version, about = "Adaptive kernel regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Validate and print the resolved plan without computing.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(config: PathBuf, dry_run: bool, opts: RunOptions) -> Result<(), RunError> {
    let (cfg, hash) = ExperimentConfig::load(&config)?;
    let opts = RunOptions { config_hash: Some(hash), ..opts };
    let plan = plan(cfg, &opts)?;
    if dry_run {
        let text = serde_json::to_string_pretty(&plan.summary()).map_err(adaptive_kernel::Error::from)?;
        println!("{text}");
        return Ok(());
    }
    let outcome = execute(&plan, opts.workers)?;
    for f in &outcome.files {
        log::info!("wrote {}", f.display());
    }
    println!("{}", plan.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, dry_run, workers, seed, out } => {
            run(config, dry_run, RunOptions { workers, seed, out, config_hash: None })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
