//! `kronykit`: plan, factorize, train and evaluate Kronecker-compressed FFNs.

mod args;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use kronykit_core::io::{self, Container, Stored};
use kronykit_core::scheme::{enumerate_schemes_with_budget, group_thousands, render_table, scalar_overhead};
use kronykit_core::{
    absorb_scalars, kronecker_decompose, norm_report, normalized_vl_init, pruning_init, reconstruction_error,
    CompressionScheme, DenseMatrix, Error, KroneckerSum, ModelBudget, Result,
};
use kronykit_train::trainer::{compress_checkpoint, eval_nll, finetune_with, train_dense_with, LogRecord, TrainLog};
use kronykit_train::{Checkpoint, ToyModelConfig, TrainConfig, SAMPLE_CORPUS};

use args::*;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    eprintln!("config: {:?}", cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Plan(a) => plan(a),
        Command::Count(a) => count(a),
        Command::Decompose(a) => decompose(a),
        Command::Error(a) => error(a),
        Command::ReportNorms(a) => report_norms(a),
        Command::TrainDense(a) => train_dense_cmd(a),
        Command::Compress(a) => compress(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval(a),
        Command::AbsorbScalars(a) => absorb(a),
        Command::Convert(a) => convert(a),
    }
}

fn budget(a: &BudgetArgs) -> ModelBudget {
    let b = match (a.base_params, a.layers) {
        (Some(base), Some(layers)) => ModelBudget::for_model(base, layers, a.shape),
        _ => ModelBudget::gpt2_small(),
    };
    if a.untied {
        b.untied()
    } else {
        b
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?);
    Ok(())
}

fn plan(a: PlanArgs) -> Result<()> {
    let (m, n) = a.budget.shape;
    let budget = budget(&a.budget);
    let schemes = enumerate_schemes_with_budget(m, n, a.rank_preserving, &budget)
        .into_iter()
        .map(|s| CompressionScheme::new(m, n, s.m1, s.n1, a.factors, &budget))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", render_table(&schemes, a.format.table())?);
    Ok(())
}

#[derive(Serialize)]
struct CountReport {
    #[serde(flatten)]
    scheme: CompressionScheme,
    scalar_params: u64,
}

fn count(a: CountArgs) -> Result<()> {
    let (m, n) = a.budget.shape;
    let budget = budget(&a.budget);
    let scheme = CompressionScheme::new(m, n, a.dims.0, a.dims.1, a.factors, &budget)?;
    let layers = budget.matrices_per_model / 2;
    let report = CountReport {
        scalar_params: scalar_overhead(layers, 2, a.factors as u64),
        scheme,
    };
    match a.format {
        OutputFormat::Json => print_json(&report)?,
        OutputFormat::Text => {
            let s = &report.scheme;
            println!("scheme: ({}, {}) x ({}, {}), {} factor(s)", s.m1, s.n1, s.m2, s.n2, s.factors);
            println!("per_matrix_params: {}", group_thousands(s.per_matrix_params));
            println!("model_total_params: {}", group_thousands(s.model_total_params));
            println!("scalar_params: {}", report.scalar_params);
            println!("rank_preserving: {}", s.rank_preserving);
        }
    }
    Ok(())
}

fn load_dense(path: &Path, tensor: Option<&str>) -> Result<DenseMatrix> {
    match io::stored_from(&Container::load(path)?, tensor)? {
        Stored::Matrix(m) => Ok(m),
        Stored::Sum(_) => Err(Error::Data(format!("{} holds a Kronecker sum, expected a dense matrix", path.display()))),
    }
}

fn decompose(a: DecomposeArgs) -> Result<()> {
    let w = load_dense(&a.input, a.tensor.as_deref())?;
    let (m1, n1) = a.dims;
    let sum = match a.strategy {
        StrategyArg::Vl => kronecker_decompose(&w, m1, n1, a.factors)?,
        StrategyArg::NormalizedVl => normalized_vl_init(&w, m1, n1, a.factors)?.0,
        StrategyArg::Prune => pruning_init(&w, a.keep_every, a.epsilon)?,
    };
    io::save_kron_sum(&a.output, &sum, a.dtype.into())?;
    eprintln!("wrote {} factor(s) of shapes {:?} to {}", sum.factor_count(), sum.factor_shapes(), a.output.display());
    print_json(&norm_report(&w, &sum)?)
}

fn load_sum(path: &Path) -> Result<KroneckerSum> {
    match io::load(path)? {
        Stored::Sum(s) => Ok(s),
        Stored::Matrix(_) => Err(Error::Data(format!("{} holds a dense matrix, expected a Kronecker sum", path.display()))),
    }
}

#[derive(Serialize)]
struct ErrorReport {
    frobenius_error: f64,
    relative_error: f64,
}

fn error(a: ErrorArgs) -> Result<()> {
    let w = load_dense(&a.input, a.tensor.as_deref())?;
    let sum = load_sum(&a.factors)?;
    let err = reconstruction_error(&w, &sum)?;
    let norm = w.frobenius_norm();
    let report = ErrorReport {
        frobenius_error: err,
        relative_error: if norm > 0.0 { err / norm } else { err },
    };
    match a.format {
        OutputFormat::Json => print_json(&report),
        OutputFormat::Text => {
            println!("frobenius_error: {:e}", report.frobenius_error);
            println!("relative_error: {:e}", report.relative_error);
            Ok(())
        }
    }
}

fn report_norms(a: ReportNormsArgs) -> Result<()> {
    let w = load_dense(&a.input, a.tensor.as_deref())?;
    let sum = match (&a.approx, a.dims) {
        (Some(path), _) => load_sum(path)?,
        (None, Some((m1, n1))) => kronecker_decompose(&w, m1, n1, a.factors.unwrap_or(1))?,
        (None, None) => unreachable!("clap requires --dims without --approx"),
    };
    let r = norm_report(&w, &sum)?;
    match a.format {
        OutputFormat::Json => print_json(&r),
        OutputFormat::Text => {
            println!("frobenius: original {:.4}, approx {:.4} ({:.2}%)", r.frob_original, r.frob_approx, r.ratio_percent);
            println!("l1: original {:.4}, approx {:.4}", r.l1_original, r.l1_approx);
            println!("alpha: {:.6}", r.alpha);
            Ok(())
        }
    }
}

fn read_corpus(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => Ok(fs::read_to_string(p)?),
        None => Ok(SAMPLE_CORPUS.to_string()),
    }
}

fn progress(r: &LogRecord) {
    if let Some(v) = r.val_nll {
        eprintln!("step {:>6}  lr {:.3e}  train {:.4}  val {:.4}", r.step, r.lr, r.train_nll, v);
    }
}

fn write_logs(logs: &LogArgs, log: &TrainLog) -> Result<()> {
    if let Some(p) = &logs.log {
        let mut buf = Vec::new();
        log.write_csv(&mut buf)?;
        fs::write(p, buf)?;
    }
    if let Some(p) = &logs.curve {
        let mut buf = Vec::new();
        log.write_curve_csv(&mut buf)?;
        fs::write(p, buf)?;
    }
    Ok(())
}

fn echo_train_config(tcfg: &TrainConfig) {
    eprintln!("train config: {}", serde_json::to_string(tcfg).unwrap_or_default());
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    initial_val_nll: Option<f64>,
    final_val_nll: Option<f64>,
    params: usize,
}

fn summary(ckpt: &Checkpoint, log: &TrainLog) -> TrainSummary {
    TrainSummary {
        steps: log.records.len(),
        initial_val_nll: log.initial_val_nll(),
        final_val_nll: log.final_val_nll(),
        params: ckpt.model.param_count(),
    }
}

fn train_dense_cmd(a: TrainDenseArgs) -> Result<()> {
    let text = read_corpus(a.corpus.as_deref())?;
    let cfg = ToyModelConfig {
        layers: a.layers,
        d_model: a.d_model,
        ffn_dim: 4 * a.d_model,
        heads: a.heads,
        context: a.context,
        vocab: 0,
    };
    let tcfg = a.train.resolve(TrainConfig::default());
    eprintln!("model config: {}", serde_json::to_string(&cfg).unwrap_or_default());
    echo_train_config(&tcfg);
    let (ckpt, log) = train_dense_with(&text, cfg, &tcfg, &mut progress)?;
    ckpt.save(&a.output)?;
    write_logs(&a.logs, &log)?;
    print_json(&summary(&ckpt, &log))
}

/// Fine-tuning defaults: a lower peak and a short warmup.
fn finetune_defaults() -> TrainConfig {
    TrainConfig {
        peak_lr: 1e-3,
        floor_lr: 1e-4,
        warmup_steps: 10,
        ..TrainConfig::default()
    }
}

fn compress(a: CompressArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.input)?;
    let strategy = a.strategy.strategy();
    let out = compress_checkpoint(&ckpt, strategy, a.dims.0, a.dims.1, a.factors)?;
    out.save(&a.output)?;
    eprintln!(
        "{strategy}: {} -> {} parameters",
        ckpt.model.param_count(),
        out.model.param_count()
    );
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.input)?;
    let text = read_corpus(a.corpus.as_deref())?;
    let tcfg = a.train.resolve(finetune_defaults());
    echo_train_config(&tcfg);
    let (out, log) = finetune_with(&ckpt, &text, &tcfg, &mut progress)?;
    out.save(&a.output)?;
    write_logs(&a.logs, &log)?;
    print_json(&summary(&out, &log))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.input)?;
    let text = fs::read_to_string(&a.text)?;
    let r = eval_nll(&ckpt, &text)?;
    match a.format {
        OutputFormat::Json => print_json(&r),
        OutputFormat::Text => {
            println!("nll: {}", r.nll);
            println!("perplexity: {}", r.perplexity);
            println!("tokens: {}", r.tokens);
            Ok(())
        }
    }
}

fn absorb(a: AbsorbArgs) -> Result<()> {
    let c = Container::load(&a.input)?;
    let mut out = Container::new();
    out.metadata = c.metadata.clone();
    let mut done: Vec<String> = Vec::new();
    for t in c.tensors() {
        match &t.group {
            Some(g) if done.contains(g) => {}
            Some(g) => {
                out.push_kron_sum(g, &absorb_scalars(&c.kron_sum(g)?), t.dtype)?;
                done.push(g.clone());
            }
            None => out.push(t.clone())?,
        }
    }
    out.save(&a.output)?;
    eprintln!("absorbed scalars of {} Kronecker group(s)", done.len());
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let c = io::import_raw_directory(&a.input)?;
    c.save(&a.output)?;
    eprintln!("converted {} tensor(s) to {}", c.tensors().len(), a.output.display());
    Ok(())
}
