pub mod config;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod experiment;
pub mod knowledge;
pub mod llm;
pub mod nn;
pub mod scenario;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
