//! File formats, checkpoints, reports and the experiment driver behind the
//! `isolab` command line tool. The numerical work lives in `isolab-core`.

pub mod checkpoint;
pub mod cli;
pub mod clock;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod manifest;
pub mod plot;

pub use error::{Error, Result};
