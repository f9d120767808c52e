//! Unified contextual video compression.
//!
//! A desk-scale learned video codec in which every non-intra frame is coded
//! by one shared conditional model: P-frames condition on two past decoded
//! frames, B-frames on one past and one future decoded frame. The crate
//! covers the full loop: GoP planning, motion estimation and coding,
//! temporal context mining, transform coding with a mean-scale hyperprior,
//! a renormalizing range coder producing real bitstreams, joint P/B
//! training, and BD-rate evaluation tooling.

pub mod autodiff;
pub mod codec;
pub mod context;
pub mod dmath;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod kernels;
pub mod model;
pub mod motion;
pub mod nn;
pub mod scheduler;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
