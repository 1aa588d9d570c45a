//! Kronecker-product compression of dense weight matrices.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense row-major matrices, products, norms, a one-sided Jacobi SVD.
//! - [`kron`]: Kronecker products, scaled Kronecker sums and materialization-free products.
//! - [`vanloan`]: nearest-Kronecker-product decomposition via rearrangement and SVD.
//! - [`init`]: norm-preserving and pruning-based factor initialization.
//! - [`scheme`]: factor-shape enumeration and parameter accounting.
//! - [`ffn`]: a two-matrix feed-forward block over Kronecker sums, with gradients.
//! - [`io`]: the `KPT1` tensor container.

pub mod error;
pub mod ffn;
pub mod init;
pub mod io;
pub mod kron;
pub mod linalg;
pub mod scheme;
pub mod vanloan;

pub use error::{Error, FormatError, Result};
pub use ffn::{DenseFfn, FactorizedFfn, GradientBundle, InitStrategy};
pub use init::{normalized_vl_init, norm_report, pruning_init, NormReport};
pub use kron::{absorb_scalars, kron, kron_matmul_batch, kron_matvec, materialize, FactorPair, KroneckerSum};
pub use linalg::{matmul, numerical_rank, thin_svd, DenseMatrix, SvdResult};
pub use scheme::{enumerate_schemes, model_size, scalar_overhead, CompressionScheme, ModelBudget, TableFormat};
pub use vanloan::{kronecker_decompose, rearrange, reconstruction_error, RearrangedMatrix};
