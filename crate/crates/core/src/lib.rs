pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
