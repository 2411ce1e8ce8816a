//! kNN attention: sub-quadratic estimators for softmax attention and its
//! gradients, and the exact reference they are validated against.
//!
//! * [`forward`]: median-of-means and weighted top-k estimators of the
//!   attention output.
//! * [`backward`]: Markov-chain and softmax-expectation estimators of the
//!   three attention gradients.
//! * [`oracle`]: exact attention, exact gradients and finite differences.
//! * [`mips`], [`sampling`], [`dist`], [`mom`]: the retrieval, sampling and
//!   boosting machinery underneath.

pub mod backward;
pub mod dist;
pub mod error;
pub mod forward;
pub mod matrix;
pub mod mips;
pub mod mom;
pub mod oracle;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use oracle::{AttentionProblem, GradientSet, UpstreamGradient};
pub use rng::RngStream;
