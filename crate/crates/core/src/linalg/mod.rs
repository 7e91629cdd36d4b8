//! Dense and row-sparse matrices, seeded randomness, and the `FLYMAT` format.

mod dense;
pub mod flymat;
mod rng;
mod sparse;

pub use dense::{axpy, dot, frobenius_inner, norm2, spectral_norm, sub, DenseMatrix};
pub use flymat::FlyMat;
pub use rng::{derive_seed, SeededStream};
pub use sparse::RowSparseMatrix;
