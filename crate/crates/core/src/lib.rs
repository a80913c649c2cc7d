//! Fast feed-forward (tree-routed) layers with explicit backward passes,
//! dense and mixture-of-experts baselines, toy training tasks, routing
//! analysis, path pruning and sparsity accounting.

pub mod baselines;
pub mod block;
pub mod cli;
pub mod config;
pub mod error;
pub mod forest;
pub(crate) mod io;
pub mod numeric;
pub mod params;
pub mod prune;
pub mod routing;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use numeric::{Matrix, Rng};
pub use params::Params;
