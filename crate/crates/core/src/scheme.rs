//! Factor-shape enumeration and parameter accounting for compressed FFN weights.
//!
//! Counts follow the weight-tied convention: the token embedding doubles as the
//! output projection and is counted once.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the untied GPT-2 small output matrix (50257 x 768).
pub const UNTIED_OUTPUT_PARAMS: u64 = 38_597_376;

/// Factor shapes `(m1 x n1) ⊗ (m2 x n2)` for an `m x n` matrix, with derived counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionScheme {
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
    pub factors: usize,
    pub per_matrix_params: u64,
    pub model_total_params: u64,
    pub rank_preserving: bool,
}

impl CompressionScheme {
    /// Scheme for an `m x n` target with `A` of shape `m1 x n1` and `k` factors.
    pub fn new(m: usize, n: usize, m1: usize, n1: usize, k: usize, budget: &ModelBudget) -> Result<Self> {
        if m1 == 0 || n1 == 0 || !m.is_multiple_of(m1) || !n.is_multiple_of(n1) {
            return Err(Error::Argument(format!(
                "({m1}, {n1}) does not divide the {m}x{n} target"
            )));
        }
        if k == 0 {
            return Err(Error::Argument("factor count must be positive".into()));
        }
        let (m2, n2) = (m / m1, n / n1);
        let per_matrix_params = k as u64 * (m1 as u64 * n1 as u64 + m2 as u64 * n2 as u64);
        let mut scheme = Self {
            m1,
            n1,
            m2,
            n2,
            factors: k,
            per_matrix_params,
            model_total_params: 0,
            rank_preserving: is_rank_preserving(m1, n1, m2, n2),
        };
        scheme.model_total_params = model_size(&scheme, budget);
        Ok(scheme)
    }

    pub fn target_shape(&self) -> (usize, usize) {
        (self.m1 * self.m2, self.n1 * self.n2)
    }

    /// Table label: the model size truncated to whole millions, e.g. `96M`.
    pub fn name(&self) -> String {
        format!("{}M", self.model_total_params / 1_000_000)
    }
}

/// Whether generic factors of these shapes reach the maximal rank `min(m, n)`.
pub fn is_rank_preserving(m1: usize, n1: usize, m2: usize, n2: usize) -> bool {
    m1.min(n1) * m2.min(n2) == (m1 * m2).min(n1 * n2)
}

/// Parameter accounting for a model whose FFN matrices are being replaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelBudget {
    /// Total parameters of the uncompressed reference model.
    pub reference_total: u64,
    /// Parameters charged to one uncompressed FFN matrix in the reference count.
    pub per_matrix_reference: u64,
    /// FFN matrices that get compressed (2 per layer).
    pub matrices_per_model: u64,
    /// Everything that is not a compressed FFN matrix.
    pub base_params: u64,
    pub tied_embeddings: bool,
    /// FFN matrix shape `(m, n)` the budget is defined for.
    pub ffn_shape: (usize, usize),
}

impl ModelBudget {
    pub fn new(
        reference_total: u64,
        per_matrix_reference: u64,
        matrices_per_model: u64,
        ffn_shape: (usize, usize),
    ) -> Result<Self> {
        let ffn = matrices_per_model
            .checked_mul(per_matrix_reference)
            .filter(|&f| f <= reference_total)
            .ok_or_else(|| Error::Argument("FFN parameters exceed the reference total".into()))?;
        Ok(Self {
            reference_total,
            per_matrix_reference,
            matrices_per_model,
            base_params: reference_total - ffn,
            tied_embeddings: true,
            ffn_shape,
        })
    }

    /// GPT-2 small: 124,439,832 parameters, 24 FFN matrices of 3072x768
    /// counted as 2,359,297 each (the `(3072, 768) ⊗ (1, 1)` identity scheme).
    pub fn gpt2_small() -> Self {
        Self::new(124_439_832, 2_359_297, 24, (3072, 768)).expect("constants are consistent")
    }

    /// Same budget with a separate (GPT-2 small sized) output projection.
    pub fn untied(self) -> Self {
        Self {
            tied_embeddings: false,
            ..self
        }
    }

    /// Budget for a generic model: `layers` blocks with an `m x n` FFN matrix pair each.
    ///
    /// The reference per-matrix count uses the same identity-scheme convention
    /// (`m*n + 1`) as [`ModelBudget::gpt2_small`].
    pub fn for_model(base_params: u64, layers: u64, ffn_shape: (usize, usize)) -> Self {
        let per_matrix_reference = (ffn_shape.0 * ffn_shape.1) as u64 + 1;
        let matrices = 2 * layers;
        Self {
            reference_total: base_params + matrices * per_matrix_reference,
            per_matrix_reference,
            matrices_per_model: matrices,
            base_params,
            tied_embeddings: true,
            ffn_shape,
        }
    }
}

/// All `(m1, n1)` divisor pairs of an `m x n` matrix with one factor,
/// sorted by parameter count, then `m1`, then `n1`.
///
/// Model totals use [`ModelBudget::gpt2_small`] accounting.
pub fn enumerate_schemes(m: usize, n: usize, rank_preserving_only: bool) -> Vec<CompressionScheme> {
    enumerate_schemes_with_budget(m, n, rank_preserving_only, &ModelBudget::gpt2_small())
}

pub fn enumerate_schemes_with_budget(
    m: usize,
    n: usize,
    rank_preserving_only: bool,
    budget: &ModelBudget,
) -> Vec<CompressionScheme> {
    let mut out: Vec<CompressionScheme> = divisors(m)
        .into_iter()
        .flat_map(|m1| divisors(n).into_iter().map(move |n1| (m1, n1)))
        .filter_map(|(m1, n1)| CompressionScheme::new(m, n, m1, n1, 1, budget).ok())
        .filter(|s| !rank_preserving_only || s.rank_preserving)
        .collect();
    out.sort_by_key(|s| (s.per_matrix_params, s.m1, s.n1));
    out
}

fn divisors(x: usize) -> Vec<usize> {
    (1..=x).filter(|d| x.is_multiple_of(*d)).collect()
}

/// `base + matrices * k * (m1*n1 + m2*n2)`, plus a separate GPT-2 output
/// matrix when embeddings are untied; scalars are not included.
pub fn model_size(scheme: &CompressionScheme, budget: &ModelBudget) -> u64 {
    let output = if budget.tied_embeddings { 0 } else { UNTIED_OUTPUT_PARAMS };
    budget.base_params + budget.matrices_per_model * scheme.per_matrix_params + output
}

/// Parameters added by one learnable scalar per factor per compressed matrix.
pub fn scalar_overhead(layers: u64, matrices_per_layer: u64, k: u64) -> u64 {
    k * matrices_per_layer * layers
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
    Text,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "text" => Ok(Self::Text),
            other => Err(Error::Argument(format!(
                "unknown table format `{other}` (expected csv, json or text)"
            ))),
        }
    }
}

const CSV_HEADER: [&str; 9] = [
    "name",
    "m1",
    "n1",
    "m2",
    "n2",
    "factors",
    "per_matrix_params",
    "model_total_params",
    "rank_preserving",
];

/// Renders schemes in the given order.
pub fn render_table(schemes: &[CompressionScheme], format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Csv => {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for s in schemes {
                w.write_record([
                    s.name(),
                    s.m1.to_string(),
                    s.n1.to_string(),
                    s.m2.to_string(),
                    s.n2.to_string(),
                    s.factors.to_string(),
                    s.per_matrix_params.to_string(),
                    s.model_total_params.to_string(),
                    s.rank_preserving.to_string(),
                ])
                .map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
        }
        TableFormat::Json => {
            let mut s = serde_json::to_string_pretty(schemes).map_err(|e| Error::Data(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        TableFormat::Text => {
            let mut out = String::from("Name | Dimension | #Params | Model size\n");
            for s in schemes {
                writeln!(
                    out,
                    "{} | ({}, {}) | {} | {}",
                    s.name(),
                    s.m1,
                    s.n1,
                    s.per_matrix_params,
                    group_thousands(s.model_total_params)
                )
                .expect("writing to a String cannot fail");
            }
            Ok(out)
        }
    }
}

/// Parses the CSV produced by [`render_table`].
pub fn parse_csv(doc: &str) -> Result<Vec<CompressionScheme>> {
    let mut r = csv::Reader::from_reader(doc.as_bytes());
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Data(format!("unexpected CSV header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Data(format!("missing column {}", CSV_HEADER[i])))
        };
        let num = |i: usize| -> Result<u64> {
            field(i)?
                .parse()
                .map_err(|_| Error::Data(format!("bad {} value {:?}", CSV_HEADER[i], rec.get(i))))
        };
        out.push(CompressionScheme {
            m1: num(1)? as usize,
            n1: num(2)? as usize,
            m2: num(3)? as usize,
            n2: num(4)? as usize,
            factors: num(5)? as usize,
            per_matrix_params: num(6)?,
            model_total_params: num(7)?,
            rank_preserving: field(8)?
                .parse()
                .map_err(|_| Error::Data("bad rank_preserving value".into()))?,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// `96128304` -> `96,128,304`.
pub fn group_thousands(x: u64) -> String {
    let digits = x.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
