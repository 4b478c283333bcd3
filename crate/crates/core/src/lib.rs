//! Unified feature normalization (batch, layer, instance and group
//! statistics) with conditional feature-wise modulation, together with the
//! models, synthetic datasets and experiment harness used to compare
//! conditional batch and conditional group normalization.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod norm;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
