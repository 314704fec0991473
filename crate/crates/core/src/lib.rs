//! Sparse mixture-of-experts language modelling with block-wise expert
//! selection, weight-decomposed experts and an expert-offload simulator.

pub mod cli;
pub mod error;
pub mod experts;
pub mod fixtures;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod offload;
pub mod routing;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
