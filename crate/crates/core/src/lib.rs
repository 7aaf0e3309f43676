pub mod chain_io;
pub mod dataset;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod sampler;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
