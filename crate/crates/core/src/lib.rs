pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod gradsuite;
pub mod nn;
pub mod regularizers;
pub mod trainer;

pub use error::{Error, Result};
