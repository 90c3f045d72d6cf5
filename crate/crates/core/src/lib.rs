//! Group-relative policy optimisation over a hybrid token + pose action space,
//! with synthetic pose tasks, verifiable rewards and a training harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
mod error;
pub mod hygrpo;
pub mod math;
pub mod policy;
pub mod pretrain;
pub mod rewards;
pub mod rng;
pub mod run;
pub mod vocab;

pub use error::{Error, Result};
