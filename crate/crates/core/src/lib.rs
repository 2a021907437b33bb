//! Uncertainty-aware reconstruction of object shape and 9-DoF pose.
//!
//! An object is described by a Gaussian over a latent shape code and a
//! Gaussian over its 9-DoF placement (translation, rotation, per-axis scale).
//! Both are fitted jointly to multi-view depth and mask observations by
//! minimizing energy-score losses on back-projected surface points and on
//! probabilistically rendered depth.

// `!(x > 0.0)` is used on purpose so NaN lands on the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod ingestion;
pub mod numeric;
pub mod optimizer;
pub mod propagation;
pub mod renderer;
pub mod surface_loss;
pub mod synth;

pub use error::{Error, Result};
