mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfig, CONFIG_ENV_VAR};
use curelora::Error;

#[derive(Parser)]
#[command(
    name = "curelora",
    about = "Weight-space safety restoration for LoRA adapters",
    version
)]
struct Cli {
    /// Path to the JSON run configuration (or set CURELORA_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap on worker threads for per-shape training.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate toy corpora, forge unsafe/safe adapter pairs, and sample the
    /// analytic oracle corpora.
    GenData,
    /// Train a translator family (mlp|ae|cvae|fm) or the MoE router (moe).
    Train {
        #[arg(long)]
        family: String,
    },
    /// Cure an adapter bundle zero-shot with a trained family or the MoE.
    Cure {
        adapter: PathBuf,
        #[arg(long)]
        family: String,
        /// Output path for the cured bundle (default: <out_dir>/cured/).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate shape coverage without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate all trained methods on the held-out adapters.
    Eval,
    /// Export gating-value statistics for the MoE router.
    RouteStats,
    /// Print the header, metadata, and tensor table of a container file.
    Inspect { bundle: PathBuf },
}

fn load_config(cli: &Cli) -> curelora::Result<RunConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV_VAR).map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config(format!(
                "no config given; pass --config or set {CONFIG_ENV_VAR}"
            ))
        })?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> curelora::Result<()> {
    match &cli.command {
        Command::GenData => commands::cmd_gen_data(&load_config(cli)?),
        Command::Train { family } => commands::cmd_train(&load_config(cli)?, family),
        Command::Cure {
            adapter,
            family,
            out,
            dry_run,
        } => commands::cmd_cure(
            &load_config(cli)?,
            &commands::CureArgs {
                adapter,
                family,
                out: out.as_deref(),
                dry_run: *dry_run,
            },
        ),
        Command::Eval => commands::cmd_eval(&load_config(cli)?),
        Command::RouteStats => commands::cmd_route_stats(&load_config(cli)?),
        Command::Inspect { bundle } => commands::cmd_inspect(bundle),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Validation(_) | Error::Structural(_)
                | Error::DimMismatch { .. } => 2,
                Error::Numerical { .. } => 3,
                Error::Io { .. } | Error::Parse { .. } => 4,
            };
            ExitCode::from(code)
        }
    }
}
