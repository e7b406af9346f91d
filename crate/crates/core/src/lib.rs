//! Few-shot classification over cached embeddings with dependency-maximization
//! training and instance-discriminant pseudo-label selection.

// `!(x > 0.0)` is deliberate throughout: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod ida;
pub mod kernels;
pub mod registry;
pub mod selection;
pub mod selftrain;
pub mod verify;

pub use error::{Error, Result};
