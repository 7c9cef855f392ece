pub mod attribution;
pub mod axioms;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod importance;
pub mod kernels;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod persist;
pub mod training;

pub use error::{Error, Result};
