pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod runner;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
