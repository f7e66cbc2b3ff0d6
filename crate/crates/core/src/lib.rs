//! Continual learning for recurrent sequence classifiers.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod protocol;
pub mod qpsolver;
pub mod strategies;
pub mod streams;

pub use error::{Error, Result};
