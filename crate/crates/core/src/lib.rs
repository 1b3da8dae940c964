//! Dense semantic correspondence by coarse-to-fine affine field regression.
//!
//! A pyramid of regressors estimates a per-pixel affine field mapping each
//! target pixel to its source location. Level `k` predicts a
//! `2^(k-1) x 2^(k-1)` grid of residual affines from a correlation volume
//! built after warping by all coarser levels, and a pixel-level stage refines
//! the result. Training is weakly supervised by forward/backward match
//! consistency.

pub mod autodiff;
pub mod cost_volume;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod image;
pub mod io;
pub mod net;
pub mod pipeline;
pub mod supervision;
pub mod synth;

pub use error::{Error, FormatError, Result};
