//! `lorafuse`: data generation, training, fused sampling, evaluation and
//! selection-trace inspection for the toy adapter-fusion model.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{GenerateArgs, Which};
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "lorafuse", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Fusion {
    Base,
    Content,
    Style,
    Merge,
    Kl,
    Topk,
}

impl Fusion {
    fn name(self) -> &'static str {
        match self {
            Fusion::Base => "base",
            Fusion::Content => "content",
            Fusion::Style => "style",
            Fusion::Merge => "merge",
            Fusion::Kl => "kl",
            Fusion::Topk => "topk",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset as PGM files plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of images; cells are cycled in order.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the base denoiser on every content/style cell.
    TrainBase {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one adapter against frozen base weights.
    TrainLora {
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample one image with the chosen fusion policy.
    Generate {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        content: Option<PathBuf>,
        #[arg(long)]
        style: Option<PathBuf>,
        #[arg(long, value_enum)]
        fusion: Option<Fusion>,
        #[arg(long, value_enum)]
        guide: Option<Switch>,
        #[arg(long, allow_hyphen_values = true)]
        m: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Precomputed reference embeddings, used instead of sampling references.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Score every comparison policy over a range of seeds.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = lorafuse_core::bench::DEFAULT_EVAL_SEEDS)]
        seeds: usize,
        /// First sampler seed; later seeds follow consecutively.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write criterion and guidance-scale ablation grids here.
        #[arg(long)]
        ablations: Option<PathBuf>,
    },
    /// Summarize a selection trace CSV.
    InspectTrace {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            n,
            config,
        } => commands::gen_data(&out, seed, n, RunConfig::load(config.as_deref())?),
        Command::TrainBase { config, out, seed } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            commands::train_base_cmd(&out, &cfg)
        }
        Command::TrainLora {
            which,
            base,
            config,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if base.is_some() {
                cfg.paths.base = base;
            }
            let base = cfg
                .paths
                .base
                .clone()
                .ok_or_else(|| CliError::Usage("train-lora requires --base".into()))?;
            commands::train_lora_cmd(which, &base, &out, &cfg)
        }
        Command::Generate {
            base,
            content,
            style,
            fusion,
            guide,
            m,
            seed,
            embeddings,
            config,
            out,
            trace,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(f) = fusion {
                cfg.fusion.policy = f.name().into();
            }
            if let Some(g) = guide {
                cfg.guidance.enabled = g == Switch::On;
            }
            if let Some(m) = m {
                cfg.guidance.m = m;
            }
            if let Some(s) = seed {
                cfg.sampler.seed = s;
            }
            cfg.paths.base = base.or(cfg.paths.base);
            cfg.paths.content = content.or(cfg.paths.content);
            cfg.paths.style = style.or(cfg.paths.style);
            let base = cfg
                .paths
                .base
                .clone()
                .ok_or_else(|| CliError::Usage("generate requires --base".into()))?;
            let args = GenerateArgs {
                base,
                content: cfg.paths.content.clone(),
                style: cfg.paths.style.clone(),
                embeddings,
                out,
                trace,
            };
            commands::generate(&args, &cfg)
        }
        Command::Evaluate {
            config,
            seeds,
            seed,
            out,
            ablations,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.sampler.seed = s;
            }
            commands::evaluate_cmd(seeds, &out, ablations.as_deref(), &cfg)
        }
        Command::InspectTrace { input, out } => commands::inspect_trace(&input, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lorafuse: {e}");
            e.exit_code()
        }
    }
}
