use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use concat_augment::augment::{CombineOptions, Strategy, StrategyKind};
use concat_augment::batching::{BatchOptions, BudgetMode};
use concat_augment::manifest::CorpusMode;
use concat_augment::pipeline::{self, AuditReport, EmitMode, PipelineConfig, RunFailure};
use concat_augment::specaugment::MaskPolicy;

#[derive(Parser)]
#[command(
    version,
    about = "Concatenation augmentation for speech-to-text training data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features and emit augmented, batched epochs.
    Run(Opts),
    /// Plan, filter and batch from manifest frame counts only.
    Audit(Opts),
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    #[value(name = "self")]
    SelfCat,
    Speaker,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Tokens,
    Text,
    AsrNormalized,
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetArg {
    Padded,
    True,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmitArg {
    Files,
    Stream,
}

#[derive(Args)]
struct Opts {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "random")]
    strategy: StrategyArg,
    /// Utterances per concatenated instance.
    #[arg(long, default_value_t = 2)]
    arity: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    /// Per-batch frame budget.
    #[arg(long, default_value_t = 40_000)]
    budget: usize,
    #[arg(long, value_enum, default_value = "padded")]
    budget_mode: BudgetArg,
    #[arg(long, value_enum, default_value = "on")]
    bucketing: Toggle,
    /// Instances longer than this are dropped.
    #[arg(long, default_value_t = 3000)]
    max_frames: usize,
    /// Emit augmented instances only.
    #[arg(long)]
    no_original: bool,
    #[arg(long, value_enum, default_value = "text")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "off")]
    specaugment: Toggle,
    #[arg(long, default_value_t = 27)]
    sa_freq: usize,
    #[arg(long, default_value_t = 100)]
    sa_time: usize,
    #[arg(long, default_value_t = 2)]
    sa_nfreq: usize,
    #[arg(long, default_value_t = 2)]
    sa_ntime: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "files")]
    emit: EmitArg,
    /// Report path; defaults to <out>/report.json.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Feature cache directory; defaults to <out>/features.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl Opts {
    fn config(&self) -> Result<PipelineConfig> {
        let kind = match self.strategy {
            StrategyArg::SelfCat => StrategyKind::CatSelf,
            StrategyArg::Speaker => StrategyKind::CatSpeaker,
            StrategyArg::Random => StrategyKind::CatRandom,
        };
        let mut cfg = PipelineConfig::new(&self.manifest, &self.out);
        cfg.strategy = Strategy::new(kind, self.arity).context("invalid --arity")?;
        cfg.mode = match self.mode {
            ModeArg::Tokens => CorpusMode::Tokens,
            ModeArg::Text => CorpusMode::Text,
            ModeArg::AsrNormalized => CorpusMode::AsrNormalized,
        };
        cfg.seed = self.seed;
        cfg.epochs = self.epochs;
        cfg.combine = CombineOptions {
            max_frames: self.max_frames,
            include_original: !self.no_original,
        };
        cfg.batch = BatchOptions {
            budget_frames: self.budget,
            mode: match self.budget_mode {
                BudgetArg::Padded => BudgetMode::Padded,
                BudgetArg::True => BudgetMode::TrueFrames,
            },
            bucketing: matches!(self.bucketing, Toggle::On),
        };
        cfg.specaugment = matches!(self.specaugment, Toggle::On).then_some(MaskPolicy {
            freq_param: self.sa_freq,
            time_param: self.sa_time,
            n_freq_masks: self.sa_nfreq,
            n_time_masks: self.sa_ntime,
            ..MaskPolicy::default()
        });
        cfg.emit = match self.emit {
            EmitArg::Files => EmitMode::Files,
            EmitArg::Stream => EmitMode::Stream,
        };
        cfg.report_path = self.report.clone();
        cfg.cache_dir = self.cache.clone();
        cfg.workers = self.workers;
        Ok(cfg)
    }
}

fn finish(
    cfg: &PipelineConfig,
    result: Result<AuditReport, RunFailure>,
    write_report: bool,
) -> ExitCode {
    match result {
        Ok(report) => {
            if write_report {
                if let Err(e) = report.write(&cfg.report_path()) {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            }
            print!("{}", report.summary());
            ExitCode::SUCCESS
        }
        Err(failure) => {
            if let Some(partial) = &failure.partial {
                if write_report {
                    let _ = partial.write(&cfg.report_path());
                }
                eprint!("{}", partial.summary());
            }
            eprintln!("error: {}", failure.error);
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (opts, is_run) = match &cli.command {
        Command::Run(o) => (o, true),
        Command::Audit(o) => (o, false),
    };
    let cfg = match opts.config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    if is_run {
        // run writes its own report, partial or not
        finish(&cfg, pipeline::run(&cfg), false)
    } else {
        finish(&cfg, pipeline::audit(&cfg), true)
    }
}
