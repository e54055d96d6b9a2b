//! Dense tanh networks with exact reverse-mode gradients, flat parameter
//! vectors and the Adam optimizer.
//!
//! All arithmetic is `f64`. Weights are stored `(out_dim, in_dim)`; the
//! optional linear bypass is stored `(in_dim, out_dim)` and contributes
//! `bypassᵀ x` to the output.

mod adam;
mod flat;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use flat::{FlatParams, ParamLayout, Segment};
pub use mlp::{BatchTape, Dense, Mlp, MlpShape};

use crate::{Error, Result};

/// Central-difference gradient of `loss` at `theta`, one coordinate at a time.
pub fn finite_diff_gradient<F>(mut loss: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let up = loss(&probe);
        probe[i] = theta[i] - step;
        let down = loss(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i} perturbation")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}
