pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod objective;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
