//! `causal-se`: data synthesis, training, enhancement and evaluation.
//!
//! Exit codes: 0 on success, 1 on a usage or configuration error, 2 when a
//! command fails at run time. The resolved configuration is printed to stderr
//! before any command runs, so stdout only carries command results.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use causal_se::config::ExperimentConfig;
use causal_se::generator::HeadMode;
use causal_se::metrics::{parse_metric, MetricFn, PESQ_RANGE};

#[derive(Parser, Debug)]
#[command(name = "causal-se", version, about = "Causal Transformer speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML file laid over the preset; only the keys it sets change.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Start from the tiny preset instead of the full-size one.
    #[arg(long, global = true)]
    toy: bool,

    /// Overrides `train.seed` (and `data.seed` for synth-data).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Input checkpoint.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,

    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// `qsnr` or `external:<command>` with `{enhanced}` and `{clean}` placeholders.
    #[arg(long, global = true, default_value = "qsnr")]
    metric: String,

    /// Raw score range of an external metric, as `lo,hi`.
    #[arg(long, global = true, value_parser = parse_range)]
    metric_range: Option<(f64, f64)>,

    /// Generator head: mask or map.
    #[arg(long, global = true, value_parser = ["mask", "map"])]
    mode: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic noisy/clean WAV pairs and a manifest into `--out`.
    SynthData {
        #[arg(long)]
        pairs: Option<usize>,
        /// Seconds per utterance.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Pre-train the generator on the L1 loss; writes the best checkpoint to `--out`.
    Pretrain {
        /// Manifest to train on; the synthetic set from `[data]` otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training log CSV, `<out>.log.csv` by default.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Skip training and write a mask-of-ones debug checkpoint.
        #[arg(long)]
        identity: bool,
    },
    /// Adversarially fine-tune the generator in `--ckpt`; writes `--out`.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Enhance one WAV file with the batch pipeline.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Enhance one WAV file frame by frame.
    Stream {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Score a checkpoint on the validation split, or one `--enhanced`/`--clean` pair.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print the raw metric value of this file against `--clean`.
        #[arg(long, requires = "clean")]
        enhanced: Option<PathBuf>,
        #[arg(long, requires = "enhanced")]
        clean: Option<PathBuf>,
    },
    /// Streaming latency per frame.
    Bench {
        #[arg(long, default_value_t = 100)]
        frames: usize,
    },
    /// Write clean/noisy/enhanced spectrograms as CSV and PGM.
    ExportSpec {
        #[arg(long = "in")]
        input: PathBuf,
        /// Clean reference for the third panel.
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long)]
        outdir: PathBuf,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err(format!("empty range {lo},{hi}"))
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<causal_se::Error> for Failure {
    fn from(e: causal_se::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type Outcome = Result<(), Failure>;

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Everything a command needs after flag resolution.
pub struct Context {
    pub config: ExperimentConfig,
    pub mode_flag: Option<HeadMode>,
    pub metric: Box<dyn MetricFn>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Context {
    pub fn ckpt(&self) -> Result<&Path, Failure> {
        self.ckpt.as_deref().ok_or_else(|| usage("this command needs --ckpt"))
    }

    pub fn out(&self) -> Result<&Path, Failure> {
        self.out.as_deref().ok_or_else(|| usage("this command needs --out"))
    }

    pub fn print_config(&self) -> Result<(), Failure> {
        eprintln!("# resolved config\n{}", self.config.to_toml()?);
        Ok(())
    }
}

fn resolve(cli: &Cli) -> Result<Context, Failure> {
    let base = ExperimentConfig::preset(cli.toy);
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &base).map_err(|e| usage(e.to_string()))?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        if matches!(cli.command, Command::SynthData { .. }) {
            config.data.seed = seed;
        }
    }
    let mode_flag = cli
        .mode
        .as_deref()
        .map(str::parse::<HeadMode>)
        .transpose()
        .map_err(|e| usage(e.to_string()))?;
    if let Some(mode) = mode_flag {
        config.generator.head_mode = mode;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    let metric = parse_metric(&cli.metric, cli.metric_range.unwrap_or(PESQ_RANGE))
        .map_err(|e| usage(e.to_string()))?;
    Ok(Context {
        config,
        mode_flag,
        metric,
        ckpt: cli.ckpt.clone(),
        out: cli.out.clone(),
    })
}

fn run(cli: Cli) -> Outcome {
    let mut ctx = resolve(&cli)?;
    match cli.command {
        Command::SynthData { pairs, duration } => commands::synth_data(&mut ctx, pairs, duration),
        Command::Pretrain { data, log, identity } => commands::pretrain(&ctx, data.as_deref(), log, identity),
        Command::Finetune { data, log } => commands::finetune(&mut ctx, data.as_deref(), log),
        Command::Enhance { input } => commands::enhance(&mut ctx, &input),
        Command::Stream { input } => commands::stream(&mut ctx, &input),
        Command::Eval { data, enhanced, clean } => match (enhanced, clean) {
            (Some(e), Some(c)) => commands::score_pair(&ctx, &e, &c),
            _ => commands::eval(&mut ctx, data.as_deref()),
        },
        Command::Bench { frames } => commands::bench(&mut ctx, frames),
        Command::ExportSpec { input, clean, outdir } => {
            commands::export_spec(&mut ctx, &input, clean.as_deref(), &outdir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SE_LOG_LEVEL", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
