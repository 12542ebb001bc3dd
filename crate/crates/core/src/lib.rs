pub mod baseline;
pub mod config;
pub mod context;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod series;
pub mod synth;
pub mod task;
pub mod train;

pub use error::{IctpError, Result};
