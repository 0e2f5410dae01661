use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ippal_cli::{cmd_benchmark, cmd_export_maps, cmd_run, load_config, resolve_out, ConfigError, SUMMARY_FILE};

#[derive(Parser)]
#[command(name = "ippal", version, about = "Budgeted path planning for active learning in aerial semantic mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one campaign per configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Sweep planners x objectives x seeds and summarise mIoU curves.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Matrix cells run concurrently.
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Convert stored map snapshots under a run directory to PGM layers.
    ExportMaps {
        dir: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn run(cli: Cli) -> Result<()> {
    let env_out = std::env::var("IPPAL_OUT").ok();
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            quiet,
        } => {
            let cfg = load_config(&config)?;
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            let out = resolve_out(out.as_deref(), &cfg, env_out.as_deref());
            let written = cmd_run(&cfg, &seeds, &out, quiet)?;
            if !quiet {
                eprintln!("wrote {} files to {}", written.len(), out.display());
            }
        }
        Command::Benchmark {
            config,
            seed,
            jobs,
            out,
            quiet,
        } => {
            let cfg = load_config(&config)?;
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            let out = resolve_out(out.as_deref(), &cfg, env_out.as_deref());
            let cells = cmd_benchmark(&cfg, &seeds, &out, jobs, quiet)?;
            if !quiet {
                eprintln!("{} cells, summary in {}", cells.len(), out.join(SUMMARY_FILE).display());
            }
        }
        Command::ExportMaps { dir, quiet } => {
            let written = cmd_export_maps(&dir)?;
            if !quiet {
                eprintln!("wrote {} files", written.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(cfg) = e.downcast_ref::<ConfigError>() {
                eprintln!("error: {cfg}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
