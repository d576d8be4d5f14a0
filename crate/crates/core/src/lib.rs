// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod encoder;
pub mod error;
pub mod export;
pub mod graph;
mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod selfcheck;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
