//! Dense kernels with explicit forward and analytic backward passes.
//!
//! Every layer keeps the activations its backward pass needs in a small
//! cache struct returned from `forward`, so batch items can be processed
//! independently and their gradients summed afterwards.

mod attention;
pub mod gradcheck;
mod linear;
mod matrix;
mod pool;
mod softmax;

pub use attention::{MsaCache, MsaGrads, MsaParams, DEFAULT_HEADS};
pub use gradcheck::{grad_check, numerical_gradient, GradCheckReport};
pub use linear::{Linear, LinearGrads};
pub use matrix::{dot, Matrix};
pub use pool::{
    aggregate, aggregate_backward, frame_attention_pool, frame_attention_pool_backward, max_pool,
    max_pool_backward, mean_pool, mean_pool_backward, Aggregation, AttentionWeighting, PoolCache,
    PoolGrads, PoolParams,
};
pub use softmax::{softmax, softmax_backward, softmax_rows, softmax_rows_backward};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// `T×D` frame-level feature matrix (one row per frame).
pub type FeatureSequence<T> = Matrix<T>;

pub(crate) fn check_shape(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<(), NnError> {
    if got != want {
        return Err(NnError::ShapeMismatch(format!(
            "{what}: expected {}x{}, got {}x{}",
            want.0, want.1, got.0, got.1
        )));
    }
    Ok(())
}
