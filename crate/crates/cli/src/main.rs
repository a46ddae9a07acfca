mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CmdError, Context};

#[derive(Debug, Parser)]
#[command(name = "svpfp", version, about = "Stochastic Vlasov-Poisson-Fokker-Planck laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted KEY=VALUE override, applied before validation (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// External noise seed (overrides noise.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Single realization: step log and snapshots.
    Run(Common),
    /// Monte Carlo over noise realizations.
    Ensemble(Common),
    /// Frozen-field iteration and Cauchy-decay report.
    Picard(Common),
    /// Hypocoercive energy trace and regularization rates.
    Hypo(Common),
    /// Time-step and grid refinement study.
    Convergence(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, which) = match &cli.command {
        Command::Run(c) => (c, "run"),
        Command::Ensemble(c) => (c, "ensemble"),
        Command::Picard(c) => (c, "picard"),
        Command::Hypo(c) => (c, "hypo"),
        Command::Convergence(c) => (c, "convergence"),
    };
    let result = (|| -> Result<(), CmdError> {
        let mut cfg = config::load(&common.config, &common.overrides)?;
        if let Some(seed) = common.seed {
            cfg.noise.seed = seed;
        }
        let out_dir = common
            .output_dir
            .clone()
            .or_else(|| cfg.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads.unwrap_or(0))
            .build()
            .map_err(|e| CmdError::Other(e.to_string()))?;
        let ctx = Context::new(cfg, out_dir)?;
        pool.install(|| match which {
            "run" => commands::cmd_run(&ctx),
            "ensemble" => commands::cmd_ensemble(&ctx),
            "picard" => commands::cmd_picard(&ctx),
            "hypo" => commands::cmd_hypo(&ctx),
            _ => commands::cmd_convergence(&ctx),
        })
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
