//! Language-conditioned spatio-temporal graph for localizing a natural-language
//! query inside an untrimmed video.

// `Var::add`/`mul` return `Result`, so they cannot be the operator traits;
// `!(x > 0.0)` is used on purpose to reject NaN as well.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod spatial;
pub mod synth;
pub mod temporal;
pub mod text;
pub mod visual;

pub use error::{Error, Result};
