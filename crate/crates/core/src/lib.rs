//! Dual-source diffusion inversion and attention-gated generation on
//! analytic Gaussian score oracles.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gating;
pub mod metrics;
pub mod nulltext;
pub mod pipeline;
pub mod plot;
pub mod predictor;
pub mod sampler;
pub mod schedule;
pub mod toy;

pub use error::{Error, Result};
