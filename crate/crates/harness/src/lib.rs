//! Training, evaluation and accounting around the core codec.

pub mod checks;
pub mod config;
pub mod count;
pub mod data;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod metrics;
pub mod run;
pub mod timing;
pub mod train;

pub use error::{HarnessError, Result};
