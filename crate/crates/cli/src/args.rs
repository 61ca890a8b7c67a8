use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xfsl_core::active::{ALConfig, Strategy};
use xfsl_core::alignment::AlignmentConfig;
use xfsl_core::attribution::AttributionMethod;
use xfsl_core::backbone::{ConvBlock, EncoderConfig};
use xfsl_core::synthdata::{Split, SynthConfig};
use xfsl_core::trainer::{TrainConfig, TrainMode};

#[derive(Parser, Debug)]
#[command(name = "xfsl", version, about = "Expert-guided few-shot learning and explainability-guided active learning")]
pub struct Cli {
    /// Seed for every random draw. `eval` and `explain` default to the
    /// model's training seed when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic confounded-lesion benchmark.
    GenData(GenDataArgs),
    /// Train an encoder episodically and write a checkpoint and loss trace.
    Train(TrainArgs),
    /// Evaluate a trained model on one split.
    Eval(EvalArgs),
    /// Write attribution heatmaps and per-sample Dice/IoU.
    Explain(ExplainArgs),
    /// Run the active-learning loop.
    Active(ActiveArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Aggregate run directories into comparison tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training-pool samples per class.
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Samples per class in each test split.
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 6)]
    pub radius_min: usize,
    #[arg(long, default_value_t = 12)]
    pub radius_max: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.95)]
    pub spurious_rate: f64,
}

impl GenDataArgs {
    pub fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            per_class_count: self.per_class,
            test_per_class: self.test_per_class,
            image_size: (self.image_size, self.image_size),
            lesion_radius_range: (self.radius_min, self.radius_max),
            noise_sigma: self.noise_sigma,
            spurious_rate: self.spurious_rate,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Guided,
    Baseline,
    RandomCam,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Guided => TrainMode::Guided,
            ModeArg::Baseline => TrainMode::Baseline,
            ModeArg::RandomCam => TrainMode::RandomCamControl,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyArg {
    Xgal,
    Random,
    Entropy,
    Dice,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Xgal => Strategy::Xgal,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Entropy => Strategy::EntropyOnly,
            StrategyArg::Dice => Strategy::DiceOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Gradcam,
    Ig,
}

impl From<MethodArg> for AttributionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gradcam => AttributionMethod::GradCam,
            MethodArg::Ig => AttributionMethod::IntegratedGradients,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    TrainPool,
    TestConfounded,
    TestDeconfounded,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::TrainPool => Split::TrainPool,
            SplitArg::TestConfounded => Split::TestConfounded,
            SplitArg::TestDeconfounded => Split::TestDeconfounded,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TargetArg {
    Predicted,
    True,
}

#[derive(Args, Debug, Clone)]
pub struct EncoderArgs {
    /// Output channels of each conv block, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Max-pool window after each block.
    #[arg(long, default_value_t = 2)]
    pub pool: usize,
    #[arg(long, default_value_t = 64)]
    pub embedding_dim: usize,
}

impl EncoderArgs {
    pub fn config(&self, image_size: (usize, usize), seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_size: (1, image_size.0, image_size.1),
            conv_blocks: self
                .channels
                .iter()
                .map(|&c| ConvBlock::new(c, self.kernel, 1, self.pool))
                .collect(),
            embedding_dim: self.embedding_dim,
            seed,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainingArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Guided)]
    pub mode: ModeArg,
    /// Weight of the explanation alignment loss; ignored in baseline mode.
    #[arg(long, default_value_t = 0.10)]
    pub alpha: f64,
    #[arg(long, default_value_t = 3)]
    pub n_way: usize,
    #[arg(long, default_value_t = 5)]
    pub k_shot: usize,
    #[arg(long, default_value_t = 5)]
    pub q_per_class: usize,
    #[arg(long, default_value_t = 7)]
    pub epochs: usize,
    #[arg(long, default_value_t = 60)]
    pub episodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    /// Smoothing constant of the soft Dice loss.
    #[arg(long, default_value_t = 1.0)]
    pub dice_eps: f64,
    /// Heatmap binarization threshold for hard Dice and IoU.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Alignment threshold of the H_aligned diagnostic.
    #[arg(long, default_value_t = 0.4)]
    pub tau: f64,
}

impl TrainingArgs {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: self.mode.into(),
            alpha: self.alpha,
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.q_per_class,
            epochs: self.epochs,
            episodes_per_epoch: self.episodes,
            learning_rate: self.lr,
            adam_beta1: self.beta1,
            adam_beta2: self.beta2,
            adam_eps: self.adam_eps,
            alignment: AlignmentConfig {
                smoothing_eps: self.dice_eps,
                binarize_threshold: self.threshold,
                tau: self.tau,
            },
            seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `train` or `active`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::TestDeconfounded)]
    pub split: SplitArg,
    /// Also write each test sample's Grad-CAM heatmap.
    #[arg(long)]
    pub dump_heatmaps: bool,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::TestDeconfounded)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Gradcam)]
    pub method: MethodArg,
    /// Class each heatmap explains.
    #[arg(long, value_enum, default_value_t = TargetArg::Predicted)]
    pub target: TargetArg,
    #[arg(long, default_value_t = 64)]
    pub ig_steps: usize,
    /// Explain only the first N samples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ActiveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Xgal)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 40)]
    pub init_labeled: usize,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[arg(long, default_value_t = 24)]
    pub batch_k: usize,
    #[arg(long, default_value_t = 2)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub finetune_episodes: usize,
    /// Score misalignment with the soft Dice loss instead of hard Dice.
    #[arg(long)]
    pub soft_dexp: bool,
    /// Split each round is evaluated on.
    #[arg(long, value_enum, default_value_t = SplitArg::TestDeconfounded)]
    pub split: SplitArg,
    /// Write the final model's Grad-CAM heatmaps for the evaluation split.
    #[arg(long)]
    pub dump_heatmaps: bool,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

impl ActiveArgs {
    pub fn config(&self, seed: u64) -> ALConfig {
        ALConfig {
            strategy: self.strategy.into(),
            lambda: self.lambda,
            init_labeled: self.init_labeled,
            rounds: self.rounds,
            batch_k: self.batch_k,
            finetune_epochs: self.finetune_epochs,
            finetune_episodes: self.finetune_episodes,
            soft_dexp: self.soft_dexp,
            seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Directory for `gradcheck.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories written by `eval` or `active`.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
