pub mod basis;
pub mod cli;
pub mod dataprep;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod linalg;
pub mod posterior;
pub mod rng;
pub mod sampler;
pub mod simulation;

pub use error::{Error, Result};
