//! Frozen sparse-projection low-rank adapters with implicit rank routing.
//!
//! The crate covers the numerical core (dense and row-sparse matrices,
//! seeded streams), the adapter variants and their manual gradients, the
//! random-projection and covariance diagnostics, weight-average merging, and
//! desk-scale experiments.

pub mod adapters;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod merging;
pub mod projection;
pub mod routing;
pub mod training;

pub use adapters::{Adapter, AdapterConfig, ForwardPass, Variant};
pub use error::{Error, Result};
pub use linalg::{DenseMatrix, FlyMat, RowSparseMatrix, SeededStream};
pub use projection::ProjectionSpec;
pub use routing::{BalanceState, RoutingDecision, SelectionMode};
pub use training::{Dataset, EpochRecord, Loss, ToyTask, TrainOptions, TrainingTrace};
