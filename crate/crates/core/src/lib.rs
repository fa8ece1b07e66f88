//! Token-embedding geometry and cross-attention binding for text-to-image
//! conditioning.
//!
//! The crate provides causality-aware orthogonalization of noun-phrase tokens,
//! per-phrase token mixing trained against entropy and Bhattacharyya losses
//! on cross-attention maps, and a numerical harness that checks the geometric
//! claims behind both on synthetic instances.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod atm;
pub mod attention;
pub mod capo;
pub mod embx;
pub mod error;
pub mod geometry;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::Matrix;
