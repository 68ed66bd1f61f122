//! `ovsed`: synthetic dataset generation, training, inference, scoring,
//! ablations, and the audio-query duration sweep, driven by one TOML
//! config with flag overrides. Exit codes: 0 success, 2 validation
//! failure, 1 runtime failure.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),+) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )+};
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    ovsed_core::numerics::NumericsError,
    ovsed_core::frontend::FrontendError,
    ovsed_core::querybank::QuerybankError,
    ovsed_core::decoder::DecoderError,
    ovsed_core::roster::RosterError,
    ovsed_core::training::TrainingError,
    ovsed_core::eval::EvalError
);

#[derive(Parser)]
#[command(
    name = "ovsed",
    version,
    about = "Open-vocabulary sound event detection pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<config::RunConfig, CliError> {
        let mut cfg = config::load_config(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }

    /// Like `load`, but when no config is given and a training run already
    /// resolved one, reuse it so inference sees the post-ablation model.
    fn load_for_inference(&self) -> Result<config::RunConfig, CliError> {
        if self.config.is_none() {
            let out_dir = self
                .out_dir
                .clone()
                .unwrap_or_else(|| config::RunConfig::default().out_dir);
            let resolved = out_dir.join("train").join("resolved_config.toml");
            if resolved.exists() {
                let mut cfg = config::load_config(Some(&resolved))?;
                if let Some(seed) = self.seed {
                    cfg.seed = seed;
                }
                cfg.out_dir = out_dir;
                return Ok(cfg);
            }
        }
        self.load()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Every class labeled and queried during training.
    Full,
    /// Rare classes stripped from training labels and queries.
    Partial,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationFlag {
    NoEventDecoder,
    NoContext,
    NoClipLoss,
    NoClipPrior,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    TrainNoMask,
    BaseInvisibleToNovel,
    BaseVisibleToNovel,
}

impl MaskArg {
    pub fn strategy(self) -> ovsed_core::decoder::MaskStrategy {
        match self {
            MaskArg::TrainNoMask => ovsed_core::decoder::MaskStrategy::TrainNoMask,
            MaskArg::BaseInvisibleToNovel => {
                ovsed_core::decoder::MaskStrategy::BaseInvisibleToNovel
            }
            MaskArg::BaseVisibleToNovel => ovsed_core::decoder::MaskStrategy::BaseVisibleToNovel,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// Large-vocabulary mode: no cross-class variance penalty.
    As,
    /// Strict mode: variance penalty weight 1.
    Desed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SubsetArg {
    All,
    Common,
    Rare,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset: WAVs, rosters, ontology, manifest.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        /// Overwrite an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a detector and write checkpoint + metrics + query store.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "full")]
        protocol: Protocol,
        /// Comma-separated ablation switches.
        #[arg(long, value_enum, value_delimiter = ',')]
        ablation: Vec<AblationFlag>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Overwrite an existing non-empty training directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the detector over WAVs and write per-threshold detections.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "base-visible-to-novel")]
        mask_strategy: MaskArg,
    },
    /// Score detections against references and plot the ROC.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "as")]
        mode: EvalMode,
        #[arg(long, value_enum, default_value = "all")]
        subset: SubsetArg,
        /// Total audited audio length; defaults to the manifest's count.
        #[arg(long)]
        dataset_seconds: Option<f64>,
        /// Also render per-clip detection timelines.
        #[arg(long)]
        timelines: bool,
    },
    /// Rebuild rare-class audio queries at several total durations and
    /// score each.
    QuerySweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated query durations in seconds.
        #[arg(long, value_delimiter = ',', required = true)]
        durations: Vec<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Gen { common, force } => commands::gen::run(&common.load()?, force),
        Cmd::Train {
            common,
            protocol,
            ablation,
            steps,
            batch_size,
            force,
        } => {
            let mut cfg = common.load()?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            commands::train::run(&cfg, protocol, &ablation, force)
        }
        Cmd::Infer {
            common,
            checkpoint,
            queries,
            audio_dir,
            mask_strategy,
        } => commands::infer::run(
            &common.load_for_inference()?,
            checkpoint.as_deref(),
            queries.as_deref(),
            audio_dir.as_deref(),
            mask_strategy,
        ),
        Cmd::Eval {
            common,
            detections,
            references,
            mode,
            subset,
            dataset_seconds,
            timelines,
        } => commands::eval_cmd::run(
            &common.load()?,
            detections.as_deref(),
            references.as_deref(),
            mode,
            subset,
            dataset_seconds,
            timelines,
        ),
        Cmd::QuerySweep {
            common,
            durations,
            checkpoint,
            queries,
        } => commands::sweep::run(
            &common.load_for_inference()?,
            &durations,
            checkpoint.as_deref(),
            queries.as_deref(),
        ),
        Cmd::Selftest => commands::selftest::run(),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    };
    std::process::exit(code);
}
