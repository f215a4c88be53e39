use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cgnnse::eval::StudyKind;

#[derive(Parser, Debug)]
#[command(name = "cgnnse", version, about = "PMU-based state estimation with a mixture-aware graph neural network")]
pub struct Cli {
    /// JSON file with option values; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads (1 gives the bit-reproducible serial path).
    #[arg(long, global = true, env = "CGNNSE_THREADS")]
    pub threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample operating conditions, solve power flows and write a dataset.
    Datagen(DatagenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Screen measurements and estimate states with a trained model.
    Estimate(EstimateArgs),
    /// Run one of the evaluation studies.
    Study(StudyArgs),
    /// Check the topology-change bound over outage sets.
    Certify(CertifyArgs),
    /// Summarize a dataset, checkpoint, case file or manifest.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseArg {
    Gaussian,
    Gmm,
    None,
}

#[derive(Args, Debug, Serialize)]
pub struct DatagenArgs {
    /// Built-in case name (ieee14, ieee30, ieee118) or case file path.
    #[arg(long)]
    pub case: String,
    /// Comma-separated PMU bus ids, or `highest-voltage`.
    #[arg(long, default_value = "highest-voltage")]
    pub pmu: String,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub noise: NoiseArg,
    /// Total vector error level of Gaussian noise.
    #[arg(long, default_value_t = 0.01)]
    pub tve: f64,
    /// Mixture components recorded for model initialization.
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    /// Squared error in p.u. and radians.
    Uniform,
    /// Each channel scaled by its spread on the training split.
    Balanced,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ArchFlags {
    #[arg(long, default_value_t = 50)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Mixture components; defaults to the dataset's setting.
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub extra_gcn: usize,
    /// Replace the attention layer by a GCN of equal width.
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long, default_value_t = cgnnse::gnn::DEFAULT_SLOPE)]
    pub slope: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 4000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Anneal the learning rate to this value by the last epoch (cosine).
    #[arg(long)]
    pub final_lr: Option<f64>,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.0)]
    pub min_delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value = "balanced")]
    pub loss: LossArg,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Dataset file written by `datagen`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Case name or path; defaults to `case.m` next to the dataset.
    #[arg(long)]
    pub case: Option<String>,
    #[command(flatten)]
    pub arch: ArchFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Also write `last.ckpt` every this many epochs (0 disables).
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON-lines file, one snapshot per line.
    #[arg(long)]
    pub measurements: PathBuf,
    /// False-positive rate of the bad-data screen, in (0, 1).
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// Skip bad-data screening.
    #[arg(long)]
    pub no_screen: bool,
    /// Branch out of service, as `from-to` or `#index` (repeatable).
    #[arg(long, value_delimiter = ',')]
    pub outage: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum StudyArg {
    Baseline,
    Topology,
    PmuFailure,
    Combined,
    Noise,
    BadData,
    AttentionAblation,
    HeadSweep,
    PmuSetSweep,
}

impl StudyArg {
    pub fn kind(self) -> StudyKind {
        match self {
            Self::Baseline => StudyKind::Baseline,
            Self::Topology => StudyKind::Topology,
            Self::PmuFailure => StudyKind::PmuFailure,
            Self::Combined => StudyKind::Combined,
            Self::Noise => StudyKind::Noise,
            Self::BadData => StudyKind::BadData,
            Self::AttentionAblation => StudyKind::AttentionAblation,
            Self::HeadSweep => StudyKind::HeadSweep,
            Self::PmuSetSweep => StudyKind::PmuSetSweep,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct StudyArgs {
    #[arg(value_enum)]
    pub kind: StudyArg,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub case: Option<String>,
    /// Trained checkpoint (baseline, topology, pmu_failure, combined, bad_data).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Trailing fraction of the dataset held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 5)]
    pub outages: usize,
    #[arg(long)]
    pub max_failures: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub failure_cap: usize,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    pub bad_fractions: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    pub bad_seeds: usize,
    /// Head counts of the head sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub sweep_heads: Vec<usize>,
    /// Extra PMU set for the set sweep, comma-separated bus ids (repeatable).
    #[arg(long)]
    pub pmu_set: Vec<String>,
    #[arg(long, default_value_t = 2)]
    pub random_pmu_sets: usize,
    #[command(flatten)]
    pub arch: ArchFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CertifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Outage depth.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Outage sets drawn for k ≥ 2.
    #[arg(long, default_value_t = 50)]
    pub cap: usize,
    /// Load snapshots per outage set.
    #[arg(long, default_value_t = 10)]
    pub snapshots: usize,
    /// Take loads from this dataset instead of sampling them.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    pub path: PathBuf,
}
