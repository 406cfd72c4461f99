//! Command-line surface, ablation sweeps and alignment evaluation for
//! style-prompting guidance.
//!
//! Exit codes of the `spg` binary: 0 success, 2 usage, 3 missing capability
//! (weights, metric model), 4 evaluation finished with failed items.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod generate;
pub mod metrics;
pub mod styles;
pub mod weights;

pub use error::{EvalError, Result};
