use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "nplm", version, about = "Kernel-based goodness-of-fit testing for generative models")]
pub struct Cli {
    /// Master seed; overrides the one stored in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// NplmConfig JSON file, as written by `select-hyper`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Which sample plays the reference role.
    #[arg(long, global = true, value_enum, default_value_t = DirectionArg::TrueAsRef)]
    pub direction: DirectionArg,

    /// Encoding of sample files read and written.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Text)]
    pub format: FormatArg,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    TrueAsRef,
    GenAsRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Text,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Partition,
    Bootstrap,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a mixture-of-Gaussians spec and/or draw samples from it.
    GenMog(GenMogArgs),
    /// Pick σ from the reference and λ from probe toys; writes a config.
    SelectHyper(SelectHyperArgs),
    /// Calibrate the null distribution of the test statistic.
    Calibrate(CalibrateArgs),
    /// Run one test against a calibrated null.
    Test(TestArgs),
    /// Repeat the test over draws from the non-reference sample.
    Validate(ValidateArgs),
    /// Classifier scores, top-quantile selection and histogram data.
    Diagnose(DiagnoseArgs),
    /// Median null statistic and cost over grids of M and/or λ.
    Scan(ScanArgs),
}

#[derive(Debug, Args)]
pub struct GenMogArgs {
    /// Existing spec to sample from instead of drawing a new one.
    #[arg(long, conflicts_with_all = ["dim", "components"])]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    /// Seed of a newly drawn spec (default: --seed).
    #[arg(long)]
    pub spec_seed: Option<u64>,
    /// Deform the spec by this strength before sampling.
    #[arg(long)]
    pub perturb: Option<f64>,
    /// Multiply every component std by this factor before sampling.
    #[arg(long)]
    pub inflate: Option<f64>,
    /// Number of points to draw; 0 writes only the spec.
    #[arg(long, default_value_t = 0)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub spec_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// Sample that plays the reference role.
    #[arg(long)]
    pub reference: PathBuf,
    /// Pool the toys are drawn from (same distribution as the reference).
    #[arg(long)]
    pub toy_pool: PathBuf,
    #[arg(long)]
    pub toy_size: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Partition)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct SelectHyperArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    #[arg(long, default_value_t = 500)]
    pub centers: usize,
    #[arg(long, default_value_t = 90.0)]
    pub percentile: f64,
    #[arg(long, default_value_t = 5000)]
    pub subsample: usize,
    /// Descending λ candidates.
    #[arg(long, value_delimiter = ',', default_values_t = [1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10])]
    pub lambda_grid: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub probe_toys: usize,
    /// Seconds per toy allowed for a λ to qualify.
    #[arg(long, default_value_t = 2.0)]
    pub time_budget: f64,
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub selection_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    #[arg(long, default_value_t = 300)]
    pub n_toys: usize,
    /// Store the null here under its cache key, reusing an existing entry.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, required_unless_present = "cache_dir")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Sample from the true distribution.
    #[arg(long = "true")]
    pub true_sample: PathBuf,
    /// Sample from the generative model.
    #[arg(long = "gen")]
    pub gen_sample: PathBuf,
}

#[derive(Debug, Args)]
pub struct NullArgs {
    /// NullModel JSON file.
    #[arg(long)]
    pub null: Option<PathBuf>,
    /// Cache directory to look the null up in.
    #[arg(long, required_unless_present = "null")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub null: NullArgs,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub null: NullArgs,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Partition)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Fraction of highest-scoring data points to select.
    #[arg(long, default_value_t = 0.01)]
    pub quantile: f64,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    /// Pool for the null score band (reference distribution).
    #[arg(long, requires = "toy_size")]
    pub toy_pool: Option<PathBuf>,
    #[arg(long)]
    pub toy_size: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub band_toys: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    /// Ascending M values.
    #[arg(long, value_delimiter = ',')]
    pub m_grid: Vec<usize>,
    /// Descending λ values.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub toys: usize,
    #[arg(long, default_value_t = 2.0)]
    pub time_budget: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}
