//! Depth estimation with K-way disjoint masked attention.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod tokens;
pub mod trainer;
pub mod verify;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
