//! The `scent` command line: corpus generation, training, conversion,
//! evaluation and plot-data export.
//!
//! Every command resolves a [`RunConfig`] from built-in defaults, an
//! optional TOML file (`--config`) and its own flags, later layers
//! winning. `convert` and `plot` fall back to the `config.toml` written
//! into the run directory by `train` when no `--config` is given.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 5 step cap reached or alignment degenerated.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::{
    cmd_convert, cmd_eval, cmd_gen_data, cmd_plot, cmd_train, prepare_pairs, training_ratio, ConvertInput, ConvertedItem, System,
    CHECKPOINT_FILE, CONFIG_FILE, CONVERSION_INDEX, EPOCH_LOG, STEP_LOG,
};
pub use config::{Ablation, AblationFlag, ConvertOptions, Interp, Overrides, Paths, RunConfig};

use crate::align::AlignError;
use crate::dsp::DspError;
use crate::eval::EvalError;
use crate::io::FormatError;
use crate::model::{ModelError, OutputMode};
use crate::numerics::NumericsError;
use crate::synth::{Split, SynthError};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("conversion did not finish: {0}")]
    Incomplete(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
            Self::Incomplete(_) => 5,
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFinite { .. } | NumericsError::NonScalarLoss(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) => n.into(),
            ModelError::Config(_) => Self::Config(e.to_string()),
            ModelError::DegenerateAlignment { .. } => Self::Incomplete(e.to_string()),
            ModelError::OutputLength { .. } => Self::Numeric(e.to_string()),
            ModelError::InputDims { .. } | ModelError::EmptySequence => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Numerics(n) => n.into(),
            TrainError::Config(_) => Self::Config(e.to_string()),
            TrainError::NonFiniteLoss => Self::Numeric(e.to_string()),
            TrainError::NoSteps | TrainError::EmptyBatch | TrainError::Checkpoint(_) | TrainError::Log(_) => {
                Self::Data(e.to_string())
            }
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Content(_) | SynthError::DegenerateWarp(_) => Self::Config(e.to_string()),
            SynthError::Dsp(d) => d.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<DspError> for CliError {
    fn from(e: DspError) -> Self {
        match e {
            DspError::InvalidConfig(_) => Self::Config(e.to_string()),
            DspError::NonFinite => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        match e {
            AlignError::InvalidRatio(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::TooManyCoefficients { .. } => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "scent", version, about = "Sequence-to-sequence voice conversion on synthetic speech")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic parallel corpus.
    GenData(GenDataArgs),
    /// Train a conversion model.
    Train(TrainArgs),
    /// Convert source utterances with a trained model.
    Convert(ConvertArgs),
    /// Score converted utterances against the reference targets.
    Eval(EvalArgs),
    /// Export alignment heat maps and ground-truth overlays.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite an existing corpus.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory receiving the checkpoint, logs and resolved configuration.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// `mse` or `gmm:<m>`.
    #[arg(long)]
    pub mode: Option<OutputMode>,
    #[arg(long, value_enum)]
    pub ablate: Vec<AblationFlag>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the run directory's checkpoint.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    /// Start over even if the run directory holds a checkpoint.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint file; defaults to the run directory's.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Convert one `[mel | aux]` feature file instead of a corpus split.
    #[arg(long, conflicts_with = "wav")]
    pub input: Option<PathBuf>,
    /// Convert one waveform; its mel spectrogram is computed here.
    #[arg(long)]
    pub wav: Option<PathBuf>,
    /// Auxiliary features accompanying `--wav`.
    #[arg(long, requires = "wav")]
    pub aux: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Stretch sources by this ratio first, or `auto` for the training
    /// split's mean duration ratio.
    #[arg(long)]
    pub interp: Option<Interp>,
    /// Griffin-Lim iterations for audio output.
    #[arg(long)]
    pub griffin_lim: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `LABEL=DIR` or `DIR` of converted features; repeatable.
    #[arg(long, required = true)]
    pub converted: Vec<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Directory holding `*.align.fea` files from `convert`.
    #[arg(long)]
    pub converted: PathBuf,
    /// Corpus supplying ground-truth paths for the overlays.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Frames per decoder step; defaults to the model's.
    #[arg(long)]
    pub r: Option<usize>,
    /// Source frames per encoder state; defaults to the model's.
    #[arg(long)]
    pub downsample: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn run_config(explicit: Option<&PathBuf>, run_dir: Option<&PathBuf>, o: &Overrides) -> Result<RunConfig, CliError> {
    let fallback = run_dir.map(|d| d.join("config.toml")).filter(|p| p.exists());
    RunConfig::resolve(explicit.or(fallback.as_ref()).map(PathBuf::as_path), o)
}

/// Parse arguments and run one command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => {
            let o = Overrides {
                corpus_dir: a.out,
                corpus_seed: a.seed,
                ..Overrides::default()
            };
            let cfg = RunConfig::resolve(cli.config.as_deref(), &o)?;
            cmd_gen_data(&cfg, a.force).map(|_| ())
        }
        Command::Train(a) => {
            let o = Overrides {
                corpus_dir: a.corpus,
                run_dir: a.run,
                train_seed: a.seed,
                epochs: a.epochs,
                lr: a.lr,
                batch: a.batch,
                mode: a.mode,
                ablate: a.ablate,
                ..Overrides::default()
            };
            let cfg = RunConfig::resolve(cli.config.as_deref(), &o)?;
            cmd_train(&cfg, a.resume, a.force).map(|_| ())
        }
        Command::Convert(a) => {
            let o = Overrides {
                corpus_dir: a.corpus,
                run_dir: a.run.clone(),
                interp: a.interp,
                griffin_lim: a.griffin_lim,
                max_steps: a.max_steps,
                ..Overrides::default()
            };
            let cfg = run_config(cli.config.as_ref(), a.run.as_ref(), &o)?;
            let checkpoint = a.checkpoint.unwrap_or_else(|| cfg.paths.run.join("checkpoint.ckpt"));
            let input = match (a.input, a.wav) {
                (Some(p), _) => ConvertInput::Features(p),
                (None, Some(wav)) => ConvertInput::Wave { wav, aux: a.aux },
                (None, None) => ConvertInput::Split(a.split),
            };
            cmd_convert(&cfg, &checkpoint, &input, &a.out).map(|_| ())
        }
        Command::Eval(a) => {
            let o = Overrides {
                corpus_dir: a.corpus,
                ..Overrides::default()
            };
            let cfg = RunConfig::resolve(cli.config.as_deref(), &o)?;
            let systems = a.converted.iter().map(|s| System::parse(s)).collect::<Vec<_>>();
            cmd_eval(&cfg, &systems, a.split, &a.out).map(|_| ())
        }
        Command::Plot(a) => {
            let o = Overrides {
                corpus_dir: a.corpus.clone(),
                run_dir: a.run.clone(),
                ..Overrides::default()
            };
            let cfg = run_config(cli.config.as_ref(), a.run.as_ref(), &o)?;
            let model = cfg.effective_model();
            let r = a.r.unwrap_or(model.r);
            let downsample = a.downsample.unwrap_or(model.downsample());
            let corpus = a.corpus.is_some().then_some(cfg.paths.corpus.as_path());
            cmd_plot(&a.converted, corpus, a.split, r, downsample, &a.out).map(|_| ())
        }
    }
}
