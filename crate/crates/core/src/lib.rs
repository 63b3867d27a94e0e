//! Online teacher-student distillation for player detection on a wide-angle
//! camera.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read closer to the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod augment;
pub mod cli;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod imageio;
pub mod motion;
pub mod sim;
pub mod student;
pub mod supervise;
pub mod types;

pub use error::{Error, Result};
