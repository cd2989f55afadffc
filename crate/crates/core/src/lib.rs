//! Continual learning with weighted low-rank adapters, orthogonality
//! regularisation and importance-based parameter freezing.

pub mod checks;
pub mod data;
mod error;
pub mod experiment;
pub mod ipc;
pub mod linalg;
pub mod lorac;
pub mod metrics;
pub mod netcore;
pub mod protocol;

pub use error::{Error, Result};
