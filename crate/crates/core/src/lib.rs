//! Identification of continuous-time nonlinear state-space models from sampled
//! input/output data with the subspace-encoder method.
//!
//! A model consists of three small tanh networks: the state derivative
//! `f(x, u)`, the output map `h(x)` and an encoder `psi` that estimates the
//! initial state of a data window from its past `n_b` inputs and `n_a`
//! outputs. Training minimises the mean squared output error of many short
//! overlapping simulations (subsections of length `T`), each started from the
//! encoder's estimate. The state derivative is scaled by `1/tau` so that both
//! the learned state and its derivative stay of unit order.
//!
//! Module map:
//!
//! - [`nnmath`]: dense networks, exact reverse-mode gradients, Adam.
//! - [`ode`]: fixed-step Euler/RK4 with zero-order-hold inputs, differentiable.
//! - [`data`]: datasets, CSV I/O, normalisation, batching, synthetic systems.
//! - [`model`]: the encoder/state-derivative/output model and its simulations.
//! - [`training`]: truncated and full simulation losses, the training loop, tau selection.
//! - [`eval`]: metrics, normalisation checks, tau sweeps, smoothness probes and
//!   the least-squares state reconstruction oracle.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nnmath;
pub mod ode;
pub mod training;

pub use error::{Error, FaultLocation, Result};
