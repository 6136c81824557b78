//! Object-centric vision token pruning.
//!
//! A slot-attention module aggregates vision tokens into as many slots as the
//! token budget, and each slot elects its most-attended token. The module is
//! trained once, across budgets, by reconstructing all tokens from the slots
//! with a random-order autoregressive decoder. Everything is generic over the
//! scalar type; the aliases below fix it to `f32` or `f64`.

pub mod autograd;
pub mod checkpoint;
pub mod cost_model;
pub mod decoder;
pub mod error;
pub mod evalbench;
pub mod matrix;
pub mod objective;
pub mod params;
pub mod pruner;
pub mod scalar;
pub mod slot_attention;
pub mod token_store;
pub mod trainer;
pub mod viz;

pub use error::{OcvtpError, Result};
pub use scalar::{Dtype, Scalar};

pub type Matrix32 = matrix::Matrix<f32>;
pub type Matrix64 = matrix::Matrix<f64>;
pub type Checkpoint32 = trainer::CheckpointBundle<f32>;
pub type Checkpoint64 = trainer::CheckpointBundle<f64>;
pub type Model32 = trainer::Model<f32>;
pub type Model64 = trainer::Model<f64>;
pub type PruneResult32 = pruner::PruneResult<f32>;
pub type PruneResult64 = pruner::PruneResult<f64>;
