//! Membership inference for language models from sampled text.
//!
//! A candidate document is split into prefix and suffix, the target model is
//! asked to continue the prefix several times, and each continuation is
//! scored by n-gram overlap with the true suffix. Documents the model has
//! seen during training tend to be reproduced more closely.

pub mod attack;
pub mod backends;
pub mod baselines;
pub mod corpus;
pub mod digest;
pub mod eval;
pub mod error;
pub mod similarity;
pub mod textops;

pub use error::{Error, Result};
