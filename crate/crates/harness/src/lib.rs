//! Orchestration for evseg: the moving-shapes toy dataset, training,
//! evaluation, fusion ablations and report rendering behind the `evseg` CLI.

pub mod ablate;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod parallel;
pub mod report;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
