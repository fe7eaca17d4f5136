//! Coupled particle / limit-particle simulation of mean-field SDEs, with
//! tools for checking the assumptions behind uniform-in-time propagation
//! of chaos and for measuring the decay of the coupling error.

pub mod analysis;
pub mod engine;
pub mod error;
pub mod meanfield;
pub mod model;
pub mod reduce;
pub mod rng;
pub mod verifier;

pub use error::{Error, Population, Result};
