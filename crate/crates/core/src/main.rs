use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ternvit::cli::{
    self, exit_code, load_run_config, parse_sparsity_list, ModelKind, RunConfig,
};
use ternvit::error::{Error, Result};

/// Ternary-quantized, sparsity-gated tiny ViT: dataset generation,
/// two-stage training, retrieval sweeps and model inspection.
#[derive(Parser)]
#[command(name = "ternvit", version, about)]
struct Cli {
    /// Worker threads for descriptor extraction (1 = sequential baseline).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Seed override. Precedence: this flag > TAT_SEED > config > 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Student,
    Teacher,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Refs,
    Queries,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic place-recognition dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize a model file from the config.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a quantized student from a full-precision teacher.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        /// Resume from a latent-bearing student checkpoint instead of a
        /// fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss-curve CSV path (default: <out>.losses.csv).
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Fine-tune a model on a dataset directory.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Recall-vs-compute sweep over sparsity levels.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sparsity levels, each in [0, 1).
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6")]
        sparsity: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a descriptor DB at one sparsity level.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
        #[arg(long, value_enum, default_value_t = SplitArg::Refs)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-tensor table of a model file.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare per-tensor bytes of a model against a baseline file.
    MemReport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
}

/// Flag > TAT_SEED > config (handled downstream) > 0.
fn resolve_seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("TAT_SEED") {
        Ok(text) => {
            let v = text.parse::<u64>().map_err(|_| {
                Error::Config(format!("TAT_SEED must be an unsigned integer, got {text:?}"))
            })?;
            Ok(Some(v))
        }
        Err(_) => Ok(None),
    }
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    load_run_config(path.map(|p| p.as_path()), seed)
}

fn run(cli: Cli) -> Result<()> {
    let seed = resolve_seed_override(cli.seed)?;
    let threads = cli.threads.max(1);
    match &cli.command {
        Command::GenData { config, out } => {
            let run = load_config(config.as_ref(), seed)?;
            cli::cmd_gen_data(&run, out)
        }
        Command::Init { config, kind, out } => {
            let run = load_config(config.as_ref(), seed)?;
            let kind = match kind {
                KindArg::Student => ModelKind::Student,
                KindArg::Teacher => ModelKind::Teacher,
            };
            cli::cmd_init(&run, kind, out)
        }
        Command::Distill { config, teacher, resume, out, losses } => {
            let run = load_config(config.as_ref(), seed)?;
            cli::cmd_distill(&run, teacher, resume.as_deref(), out, losses.as_deref())
        }
        Command::Finetune { config, model, data, out, losses } => {
            let run = load_config(config.as_ref(), seed)?;
            cli::cmd_finetune(&run, model, data, out, losses.as_deref())
        }
        Command::Sweep { model, data, sparsity, out } => {
            let levels = parse_sparsity_list(sparsity)?;
            cli::cmd_sweep(model, data, &levels, out, threads)
        }
        Command::Extract { model, data, sparsity, split, out } => {
            let split = match split {
                SplitArg::Refs => "refs",
                SplitArg::Queries => "queries",
                SplitArg::All => "all",
            };
            cli::cmd_extract(model, data, *sparsity, split, out, threads)
        }
        Command::Inspect { model } => cli::cmd_inspect(model),
        Command::MemReport { model, baseline } => cli::cmd_memory_report(model, baseline),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
