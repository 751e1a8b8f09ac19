//! Meta-learning laboratory: differentiable inner loops, learnable gradient
//! transforms and closed-form oracles for one-dimensional regression.

// `!(x > 0.0)` is how argument checks reject NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod maml;
pub mod metaopt;
pub mod models;
pub mod oracle;
pub mod record;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
