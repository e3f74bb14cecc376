//! Variable-rate learned image codec with importance-driven multi-path
//! aggregation (MPA): per-position routing of latent features between a
//! generalised main MLP path and task-specific side paths.

pub mod autodiff;
pub mod entropy;
pub mod error;
pub mod harness;
pub mod init;
pub mod model;
pub mod routing;
pub mod train;

pub use error::{Error, Result};
