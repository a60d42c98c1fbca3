pub mod backbone;
pub mod cli;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod numkernel;

pub use error::{Error, Result};
