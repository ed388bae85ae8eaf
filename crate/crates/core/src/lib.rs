//! StepNet: part-level spatial and temporal modeling for isolated sign
//! language recognition, on a small reverse-mode differentiation substrate.

pub mod backbone;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod model;
pub mod nn;
pub mod params;
pub mod shapes;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
