pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod nn;
pub mod ssm;
pub mod textcodec;
pub mod training;

pub use error::{Error, Result};
