//! Invariant learning on graphs under distribution shift.
//!
//! Environment partitioning with disentangled environment features,
//! environment extrapolation through differentiable edge interventions, and
//! the baselines and evaluation tooling around them.

pub mod autograd;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod extrapolate;
pub mod graph;
pub mod nets;
pub mod objectives;
pub mod oracle;
pub mod partition;
pub mod pipeline;
pub mod trace;

pub use error::{Error, Result};
pub use graph::{Graph, MultiGraphDataset};
