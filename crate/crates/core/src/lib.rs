pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod ordering;
pub mod results;
pub mod synth;
pub mod trainer;
pub mod vbnn;

pub use error::{Error, FormatError, Result};
