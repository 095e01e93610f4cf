//! Dense arrays and a reverse-mode differentiation tape.

mod array;
pub mod gradcheck;
mod graph;
mod params;

pub use array::Array;
pub(crate) use graph::{sigmoid, softmax_in_place};
pub use graph::{AttnLayout, Gradients, Graph, Segment, Var};
pub use params::{Param, ParamGroup, ParamId, ParamStore};

/// Default epsilon for RMS normalisation.
pub const RMS_EPS: f64 = 1e-6;
