use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hlm::config::{smoke_enabled, RunConfig};
use hlm::run::{self, RunDir};
use hybridlm::train::PrecisionMode;
use hybridlm::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hlm", version, about = "Train, benchmark and compress small hybrid Mamba-2/attention language models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration. Defaults to <out>/config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed and every derived stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Fp8,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus.
    GenCorpus,
    /// Pretrain from scratch.
    Train {
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
    },
    /// Measure decode throughput and write cost curves.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score pruned candidates and short-distill the shortlist.
    PruneSearch {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Extended distillation of the best shortlisted candidate.
    Distill {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rebuild the CSV and Markdown tables from existing outputs.
    Report,
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let saved = common.out.join("config.json");
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if saved.exists() => RunConfig::load(&saved)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if smoke_enabled() {
        cfg = cfg.smoke();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.workers.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let dir = RunDir::create(&cli.common.out)?;
    if let Command::Report = cli.command {
        return print(&hlm::report::write_all(&dir)?);
    }
    let cfg = resolve_config(&cli.common)?;
    dir.write_config(&cfg)?;
    let ckpt = |c: Option<PathBuf>| c.unwrap_or_else(|| run::default_checkpoint(&dir));
    match cli.command {
        Command::GenCorpus => print(&run::gen_corpus(&cfg, &dir)?),
        Command::Train { mode } => {
            let modes: &[PrecisionMode] = match mode {
                Mode::Full => &[PrecisionMode::Full],
                Mode::Fp8 => &[PrecisionMode::Fp8Mixed],
                Mode::Both => &[PrecisionMode::Full, PrecisionMode::Fp8Mixed],
            };
            print(&run::train_cmd(&cfg, &dir, modes)?)
        }
        Command::Bench { checkpoint } => print(&run::bench_cmd(&cfg, &dir, &ckpt(checkpoint))?),
        Command::PruneSearch { checkpoint } => print(&run::prune_search_cmd(&cfg, &dir, &ckpt(checkpoint))?),
        Command::Distill { checkpoint } => print(&run::distill_cmd(&cfg, &dir, &ckpt(checkpoint))?),
        Command::Report => unreachable!(),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
