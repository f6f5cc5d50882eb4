//! Graph Sinkhorn attention.
//!
//! Edge attention comes from a soft top-r selection solved as a two-row
//! entropic optimal-transport problem; node attention is the max of the
//! incident edge attention. Both weight a GIN predictor, and the whole
//! pipeline is differentiable through the unrolled Sinkhorn iterations.

pub mod cli;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod rng;
pub mod sinkhorn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
