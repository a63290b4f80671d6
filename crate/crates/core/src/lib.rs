//! Prototype-ball image classifiers.
//!
//! Each prototype is a ball in latent space rather than a single point, so
//! it can be visualized by every training patch it contains. The crate covers
//! the clamped ball similarities, the top-k cluster and radius losses, staged
//! training with pruning and last-layer finetuning, and explanation reports.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
