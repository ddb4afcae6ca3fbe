pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod search;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{NonError, Result};
