use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kronykit_core::io::Dtype;
use kronykit_core::{InitStrategy, TableFormat};
use kronykit_train::TrainConfig;

/// Parses `MxN` (also `MXN`) into a pair of positive integers.
pub fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("malformed shape `{s}`: expected MxN with positive integers, e.g. 3072x768");
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let m: usize = a.trim().parse().map_err(|_| bad())?;
    let n: usize = b.trim().parse().map_err(|_| bad())?;
    if m == 0 || n == 0 {
        return Err(bad());
    }
    Ok((m, n))
}

#[derive(Debug, Parser)]
#[command(name = "kronykit", version, about = "Kronecker-product compression of transformer FFN weights")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List factor shapes for a weight matrix with parameter counts.
    Plan(PlanArgs),
    /// Parameter count of one factor shape.
    Count(CountArgs),
    /// Factorize a dense matrix stored in a KPT1 file.
    Decompose(DecomposeArgs),
    /// Frobenius error between a dense matrix and a Kronecker sum.
    Error(ErrorArgs),
    /// Norms of a matrix and of its Kronecker approximation.
    ReportNorms(ReportNormsArgs),
    /// Train a dense toy model on a text file.
    TrainDense(TrainDenseArgs),
    /// Replace every FFN of a toy checkpoint by Kronecker factors.
    Compress(CompressArgs),
    /// Continue training a (compressed) toy checkpoint.
    Finetune(FinetuneArgs),
    /// Per-token NLL and perplexity of a toy checkpoint on a text file.
    Eval(EvalArgs),
    /// Fold every learnable scalar into its A factor.
    AbsorbScalars(AbsorbArgs),
    /// Convert a directory of raw f32 tensors plus manifest.json to KPT1.
    Convert(ConvertArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

impl Format {
    pub fn table(self) -> TableFormat {
        match self {
            Format::Text => TableFormat::Text,
            Format::Csv => TableFormat::Csv,
            Format::Json => TableFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F64,
    F32,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F64 => Dtype::F64,
            DtypeArg::F32 => Dtype::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Vl,
    #[value(alias = "normalized-vl")]
    NormalizedVl,
    Prune,
}

#[derive(Debug, Args)]
pub struct StrategyArgs {
    #[arg(long, value_enum, default_value = "normalized-vl")]
    pub strategy: StrategyArg,
    /// Second entry of the pruning factor `[1, epsilon]`.
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Row stride kept by the pruning strategy.
    #[arg(long, default_value_t = 2)]
    pub keep_every: usize,
}

impl StrategyArgs {
    pub fn strategy(&self) -> InitStrategy {
        match self.strategy {
            StrategyArg::Vl => InitStrategy::Vl,
            StrategyArg::NormalizedVl => InitStrategy::NormalizedVl,
            StrategyArg::Prune => InitStrategy::Prune {
                keep_every: self.keep_every,
                epsilon: self.epsilon,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Target matrix shape.
    #[arg(long, value_parser = parse_shape, value_name = "MxN", default_value = "3072x768")]
    pub shape: (usize, usize),
    /// Count a separate output projection instead of tied embeddings.
    #[arg(long)]
    pub untied: bool,
    /// Non-FFN parameters of a custom model (default: GPT-2 small accounting).
    #[arg(long, requires = "layers")]
    pub base_params: Option<u64>,
    /// Transformer blocks of a custom model, two FFN matrices each.
    #[arg(long, requires = "base_params")]
    pub layers: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Keep only shapes whose Kronecker product can reach full rank.
    #[arg(long)]
    pub rank_preserving: bool,
    #[arg(long, default_value_t = 1)]
    pub factors: usize,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Shape of the A factor.
    #[arg(long, value_parser = parse_shape, value_name = "M1xN1")]
    pub dims: (usize, usize),
    #[arg(long, default_value_t = 1)]
    pub factors: usize,
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// KPT1 file holding the dense matrix.
    #[arg(long)]
    pub input: PathBuf,
    /// Tensor to read when the file holds several.
    #[arg(long)]
    pub tensor: Option<String>,
    #[arg(long, value_parser = parse_shape, value_name = "M1xN1")]
    pub dims: (usize, usize),
    #[arg(long, default_value_t = 1)]
    pub factors: usize,
    #[arg(long, value_enum, default_value = "vl")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 2)]
    pub keep_every: usize,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ErrorArgs {
    /// KPT1 file holding the dense matrix.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub tensor: Option<String>,
    /// KPT1 file holding the Kronecker sum.
    #[arg(long)]
    pub factors: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct ReportNormsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub tensor: Option<String>,
    /// Compare against this Kronecker sum instead of a fresh decomposition.
    #[arg(long, conflicts_with_all = ["dims", "factors"])]
    pub approx: Option<PathBuf>,
    #[arg(long, value_parser = parse_shape, value_name = "M1xN1", required_unless_present = "approx")]
    pub dims: Option<(usize, usize)>,
    #[arg(long)]
    pub factors: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputFormat,
}

/// Optimizer flags; unset values fall back to per-command defaults.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub batch_sequences: Option<usize>,
    #[arg(long)]
    pub grad_accum_steps: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub floor_lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub eval_windows: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, env = "KRONYKIT_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl TrainArgs {
    pub fn resolve(&self, defaults: TrainConfig) -> TrainConfig {
        TrainConfig {
            batch_sequences: self.batch_sequences.unwrap_or(defaults.batch_sequences),
            grad_accum_steps: self.grad_accum_steps.unwrap_or(defaults.grad_accum_steps),
            peak_lr: self.peak_lr.unwrap_or(defaults.peak_lr),
            floor_lr: self.floor_lr.unwrap_or(defaults.floor_lr),
            warmup_steps: self.warmup_steps.unwrap_or(defaults.warmup_steps),
            epochs: self.epochs.unwrap_or(defaults.epochs),
            max_steps: self.max_steps.or(defaults.max_steps),
            eval_interval: self.eval_interval.unwrap_or(defaults.eval_interval),
            eval_windows: self.eval_windows.unwrap_or(defaults.eval_windows),
            weight_decay: self.weight_decay.unwrap_or(defaults.weight_decay),
            seed: self.seed,
            ..defaults
        }
    }
}

#[derive(Debug, Args)]
pub struct LogArgs {
    /// Per-step CSV log (`step,lr,train_nll,val_nll`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Validation NLL against epoch fraction, as CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDenseArgs {
    /// UTF-8 training text; defaults to the bundled sample.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Model width; the FFN hidden size is 4x this.
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub context: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub logs: LogArgs,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Shape of the A factor of the `hidden x d` input matrix.
    #[arg(long, value_parser = parse_shape, value_name = "M1xN1", default_value = "128x32")]
    pub dims: (usize, usize),
    #[arg(long, default_value_t = 1)]
    pub factors: usize,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub logs: LogArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Held-out UTF-8 text.
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct AbsorbArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Directory with `manifest.json` and raw little-endian f32 files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(parse_shape("3072x768"), Ok((3072, 768)));
        assert_eq!(parse_shape("4X2"), Ok((4, 2)));
        for bad in ["3072", "0x4", "ax4", "4x", "4x4x4", ""] {
            let err = parse_shape(bad).unwrap_err();
            assert!(err.contains(&format!("`{bad}`")), "{err}");
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
