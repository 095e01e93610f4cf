//! Generative recommendation core.
//!
//! The crate is generic over a [`Scalar`] type (`f32` or `f64`). Gradient
//! checks and oracles run in `f64`; training loops may use either. Concrete
//! aliases for both precisions are exported at the crate root.

pub mod checkpoint;
pub mod decoder;
pub mod ecpo;
pub mod encoder;
pub mod error;
pub mod generation;
pub mod nn;
pub mod numerics;
pub mod policy;
pub mod reward;
pub mod rng;
mod scalar;
pub mod stats;
pub mod tokenizer;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Array64 = numerics::Array<f64>;
pub type Array32 = numerics::Array<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Graph32 = numerics::Graph<f32>;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
