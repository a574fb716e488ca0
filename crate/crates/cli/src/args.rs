//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eegphon_core::{SampleUnit, SplitScheme, Task};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "eegphon", version, about = "EEG phoneme decoding benchmark: synthesis, preprocessing, training, evaluation and controls")]
pub struct Cli {
    /// Upper bound on worker threads (default: one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic subject containers.
    Synth(SynthArgs),
    /// Turn subject containers into an epoch archive.
    Preprocess(PreprocessArgs),
    /// Train one model on a fixed or expanded split.
    Train(TrainArgs),
    /// Score checkpoints, or run leave-one-subject-out cross-validation.
    Evaluate(EvaluateArgs),
    /// Confound controls: masking, NULL-only, permutation, acoustic-only, bootstrap.
    Controls(ControlsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureArg {
    Erp,
    ErpWideband,
    Dda,
}

impl FeatureArg {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureArg::Erp => "erp",
            FeatureArg::ErpWideband => "erp-wideband",
            FeatureArg::Dda => "dda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Phoneme,
    Place,
    Manner,
    Voicing,
    Category,
    Complexity,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Phoneme => Task::Phoneme,
            TaskArg::Place => Task::Place,
            TaskArg::Manner => Task::Manner,
            TaskArg::Voicing => Task::Voicing,
            TaskArg::Category => Task::Category,
            TaskArg::Complexity => Task::Complexity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Fixed,
    Expanded,
    Loso,
}

impl From<SplitArg> for SplitScheme {
    fn from(s: SplitArg) -> SplitScheme {
        match s {
            SplitArg::Fixed => SplitScheme::Fixed,
            SplitArg::Expanded => SplitScheme::Expanded,
            SplitArg::Loso => SplitScheme::Loso,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitArg {
    Position,
    Trial,
}

impl From<UnitArg> for SampleUnit {
    fn from(u: UnitArg) -> SampleUnit {
        match u {
            UnitArg::Position => SampleUnit::Position,
            UnitArg::Trial => SampleUnit::Trial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderArg {
    Conformer,
    Lr,
    Lda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSetArg {
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory that receives one container per subject.
    #[arg(long)]
    pub output: PathBuf,
    /// JSON generator spec; omitted fields keep their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Overrides the generator spec's subject count.
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Overrides the generator spec's template amplitude (µV).
    #[arg(long)]
    pub amplitude: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// A container directory, or a directory of containers.
    #[arg(long)]
    pub input: PathBuf,
    /// Epoch archive to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub feature: FeatureArg,
    #[arg(long)]
    pub seed: u64,
}

/// Model and optimizer settings shared by every command that trains a Conformer.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// JSON model configuration; omitted fields keep their defaults.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// JSON training configuration; omitted fields keep their defaults.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Small model (d_model 16, one block) for desk-scale runs.
    #[arg(long)]
    pub tiny: bool,
    /// Add the auxiliary CTC head.
    #[arg(long)]
    pub ctc: bool,
    /// Train the four articulatory heads jointly.
    #[arg(long)]
    pub multi_task: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Epoch archive.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for the checkpoint, history and report.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, value_enum, default_value = "fixed")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "position")]
    pub unit: UnitArg,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Epoch archive(s); a second archive pairs with the second checkpoint.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Trained checkpoint(s); omit for cross-validation.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Average the logits of two checkpoints.
    #[arg(long)]
    pub ensemble: bool,
    /// Subjects scored in checkpoint mode, taken from the checkpoint's split.
    #[arg(long, value_enum, default_value = "test")]
    pub eval_set: EvalSetArg,
    /// Task for cross-validation (checkpoint mode uses the checkpoint's task).
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, value_enum, default_value = "loso")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "conformer")]
    pub decoder: DecoderArg,
    #[arg(long, value_enum, default_value = "position")]
    pub unit: UnitArg,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ControlsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub seed: u64,
    /// Keep only trials recorded without stimulation.
    #[arg(long)]
    pub null_only: bool,
    /// Zero the 0-200 ms window before decoding.
    #[arg(long)]
    pub mask_early: bool,
    /// Label permutations per fold (0 skips the test).
    #[arg(long, default_value_t = 0)]
    pub permute: usize,
    /// Bootstrap resamples for the accuracy confidence interval.
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, value_enum, default_value = "lr")]
    pub decoder: DecoderArg,
    #[arg(long, value_enum, default_value = "trial")]
    pub unit: UnitArg,
    #[command(flatten)]
    pub model: ModelArgs,
}
