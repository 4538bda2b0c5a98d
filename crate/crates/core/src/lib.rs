#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Streaming Legendre projection of latent trajectories, the conditional
//! latent flow built on top of it, a small transformer trained to match that
//! flow, and the numerical harness used to check the resulting error bounds.

pub mod dataset;
pub mod dit;
pub mod error;
pub mod evaluate;
pub mod flow;
pub mod legs;
pub mod pipeline;
pub mod train;
pub mod world;

pub use error::{Error, Result};

/// Decimal rendering with 17 significant digits, enough to round-trip any
/// `f64`.
pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}
