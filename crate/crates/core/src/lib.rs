pub mod energy;
pub mod error;

pub use error::{Error, Result};
pub mod divergence;
pub mod integrator;
pub mod datagen;
pub mod trainer;
pub mod eval;
pub mod config;
pub mod cli;
