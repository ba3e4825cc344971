//! Linear algebra kernels: a small symmetric sparse type, a fill-reducing
//! ordering, a sparse Cholesky factorization and dense helpers.

mod cholesky;
mod dense;
mod ordering;
mod sparse;

pub use cholesky::{CholeskyFactor, SymbolicCholesky};
pub use dense::{numerical_null_space, numerical_rank, sym_eigen, DenseCholesky, RANK_TOLERANCE};
pub use ordering::{minimum_degree, Ordering};
pub use sparse::SymSparse;
