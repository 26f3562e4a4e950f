//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Models are written once against [`Graph`]. Running them on [`Eager`]
//! gives plain forward values; running them on a [`Tape`] records every
//! primitive so that [`backward`] can compose exact derivatives by the
//! chain rule. The primitive set is deliberately small: matmul, add/sub,
//! elementwise mul, row-bias add, tanh, sigmoid, softmax, log, sum, scale,
//! concat, embedding gather and scalar pick.

mod array;
pub mod kernels;
mod tape;

pub use array::Array;
pub use kernels::{cross_entropy, softmax};
pub use tape::{backward, Eager, Gradients, Graph, NodeId, Op, Tape, TapeNode};

use crate::error::{Error, Result};

/// Plain gradient descent: `w <- w - lr * g` for every pair.
pub fn sgd_step(weights: &mut [&mut Array], grads: &[&Array], learning_rate: f64) -> Result<()> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(Error::Contract(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    if weights.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} weights but {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    for (w, g) in weights.iter().zip(grads) {
        if !w.same_shape(g) {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match weight shape {:?}",
                g.shape(),
                w.shape()
            )));
        }
    }
    for (w, g) in weights.iter_mut().zip(grads) {
        w.add_scaled(g, -learning_rate)?;
    }
    Ok(())
}
