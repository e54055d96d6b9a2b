//! Fixed-step integration of `dx/dt = (1/tau) f(x, u)` with the input held
//! constant over each sample interval (zero-order hold).
//!
//! Three entry points share one stepping scheme:
//!
//! - [`ode_step`] / [`rollout`] for plain closures on slices;
//! - [`ode_step_vjp`] for reverse-mode differentiation of one step of a single
//!   trajectory, recomputing the forward stages;
//! - [`step_batch`] / [`step_batch_backward`] for many trajectories at once,
//!   keeping a tape of stage activations.
//!
//! Gradients are obtained by differentiating the unrolled discrete steps.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::nnmath::{BatchTape, Mlp};
use crate::{Error, FaultLocation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Equal sub-intervals per sample interval.
    pub substeps: usize,
    /// State-derivative normalisation time constant, seconds.
    pub tau: f64,
    /// Sample period, seconds.
    pub dt: f64,
}

impl SolverConfig {
    pub fn new(method: Method, substeps: usize, tau: f64, dt: f64) -> Result<Self> {
        let cfg = Self { method, substeps, tau, dt };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Single RK4 step per sample.
    pub fn rk4(tau: f64, dt: f64) -> Result<Self> {
        Self::new(Method::Rk4, 1, tau, dt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps < 1 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        Ok(())
    }

    /// `dt / tau`, the only combination of the two that affects integration.
    pub fn dt_over_tau(&self) -> f64 {
        self.dt / self.tau
    }

    /// Scaled sub-step length `(dt / substeps) / tau`.
    fn c(&self) -> f64 {
        (self.dt / self.substeps as f64) / self.tau
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Advance `x` by one sample interval with `u` held constant.
pub fn ode_step<F>(mut f: F, x: &[f64], u: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[f64]) -> Vec<f64>,
{
    cfg.validate()?;
    let c = cfg.c();
    let mut x = x.to_vec();
    for sub in 0..cfg.substeps {
        x = match cfg.method {
            Method::Euler => axpy(&x, c, &f(&x, u)),
            Method::Rk4 => {
                let k1 = f(&x, u);
                let k2 = f(&axpy(&x, 0.5 * c, &k1), u);
                let k3 = f(&axpy(&x, 0.5 * c, &k2), u);
                let k4 = f(&axpy(&x, c, &k3), u);
                x.iter()
                    .enumerate()
                    .map(|(i, xi)| xi + c / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                    .collect()
            }
        };
        if !all_finite(&x) {
            return Err(Error::NumericFault(FaultLocation {
                start: None,
                step: 0,
                substep: sub,
            }));
        }
    }
    Ok(x)
}

/// States `[x0, x1, .., x_K]` obtained by stepping through every input of `u_seq`.
pub fn rollout<F>(mut f: F, x0: &[f64], u_seq: &[Vec<f64>], cfg: &SolverConfig) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64], &[f64]) -> Vec<f64>,
{
    let mut states = Vec::with_capacity(u_seq.len() + 1);
    states.push(x0.to_vec());
    for (k, u) in u_seq.iter().enumerate() {
        if !all_finite(u) {
            return Err(Error::invalid(format!("input {k} is not finite")));
        }
        let next = ode_step(&mut f, states.last().unwrap(), u, cfg).map_err(|e| match e {
            Error::NumericFault(loc) => Error::NumericFault(FaultLocation { step: k, ..loc }),
            other => other,
        })?;
        states.push(next);
    }
    Ok(states)
}

/// A parameterised state derivative that supports vector-Jacobian products.
pub trait VectorField {
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64>;

    /// Adds `∂(g·f)/∂θ` into `param_grad` and returns `∂(g·f)/∂x`.
    fn vjp(&self, x: &[f64], u: &[f64], g: &[f64], param_grad: &mut [f64]) -> Vec<f64>;
}

/// Reverse-mode derivative of [`ode_step`]: given `g_next = ∂L/∂x_next`, adds
/// the parameter contribution into `param_grad` and returns `∂L/∂x`.
pub fn ode_step_vjp<F: VectorField>(
    f: &F,
    x: &[f64],
    u: &[f64],
    cfg: &SolverConfig,
    g_next: &[f64],
    param_grad: &mut [f64],
) -> Vec<f64> {
    let c = cfg.c();
    // Substep start states.
    let mut starts = Vec::with_capacity(cfg.substeps);
    let mut xs = x.to_vec();
    for _ in 0..cfg.substeps {
        starts.push(xs.clone());
        xs = match cfg.method {
            Method::Euler => axpy(&xs, c, &f.eval(&xs, u)),
            Method::Rk4 => {
                let k1 = f.eval(&xs, u);
                let k2 = f.eval(&axpy(&xs, 0.5 * c, &k1), u);
                let k3 = f.eval(&axpy(&xs, 0.5 * c, &k2), u);
                let k4 = f.eval(&axpy(&xs, c, &k3), u);
                (0..xs.len())
                    .map(|i| xs[i] + c / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                    .collect()
            }
        };
    }

    let mut g = g_next.to_vec();
    for x0 in starts.iter().rev() {
        g = match cfg.method {
            Method::Euler => {
                let scaled: Vec<f64> = g.iter().map(|v| c * v).collect();
                let d = f.vjp(x0, u, &scaled, param_grad);
                axpy(&g, 1.0, &d)
            }
            Method::Rk4 => {
                let k1 = f.eval(x0, u);
                let x2 = axpy(x0, 0.5 * c, &k1);
                let k2 = f.eval(&x2, u);
                let x3 = axpy(x0, 0.5 * c, &k2);
                let k3 = f.eval(&x3, u);
                let x4 = axpy(x0, c, &k3);

                let mut gx = g.clone();
                let gk4: Vec<f64> = g.iter().map(|v| c / 6.0 * v).collect();
                let d4 = f.vjp(&x4, u, &gk4, param_grad);
                let gk3: Vec<f64> = g.iter().zip(&d4).map(|(v, d)| c / 3.0 * v + c * d).collect();
                let d3 = f.vjp(&x3, u, &gk3, param_grad);
                let gk2: Vec<f64> = g.iter().zip(&d3).map(|(v, d)| c / 3.0 * v + 0.5 * c * d).collect();
                let d2 = f.vjp(&x2, u, &gk2, param_grad);
                let gk1: Vec<f64> = g.iter().zip(&d2).map(|(v, d)| c / 6.0 * v + 0.5 * c * d).collect();
                let d1 = f.vjp(x0, u, &gk1, param_grad);
                for i in 0..gx.len() {
                    gx[i] += d1[i] + d2[i] + d3[i] + d4[i];
                }
                gx
            }
        };
    }
    g
}

/// A state derivative evaluated on a batch of rows, with a tape for backprop.
pub trait BatchField {
    type Tape;
    type Grad;

    fn forward(&self, x: &Array2<f64>, u: &Array2<f64>) -> (Array2<f64>, Self::Tape);

    /// Accumulates the parameter gradient and returns the state gradient.
    fn backward(&self, tape: &Self::Tape, g: &Array2<f64>, grad: &mut Self::Grad) -> Array2<f64>;
}

/// Stage tapes of one batched step, in evaluation order.
pub struct StepTape<T> {
    stages: Vec<T>,
}

/// First non-finite row produced by [`step_batch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchFault {
    pub row: usize,
    pub substep: usize,
}

fn first_non_finite_row(x: &Array2<f64>) -> Option<usize> {
    x.axis_iter(Axis(0)).position(|r| r.iter().any(|v| !v.is_finite()))
}

/// One sample interval for every row of `x`, inputs `u` held per row.
pub fn step_batch<F: BatchField>(
    f: &F,
    x: &Array2<f64>,
    u: &Array2<f64>,
    cfg: &SolverConfig,
) -> std::result::Result<(Array2<f64>, StepTape<F::Tape>), BatchFault> {
    let c = cfg.c();
    let per = match cfg.method {
        Method::Euler => 1,
        Method::Rk4 => 4,
    };
    let mut stages = Vec::with_capacity(cfg.substeps * per);
    let mut xs = x.clone();
    for sub in 0..cfg.substeps {
        xs = match cfg.method {
            Method::Euler => {
                let (k1, t1) = f.forward(&xs, u);
                stages.push(t1);
                xs.scaled_add(c, &k1);
                xs
            }
            Method::Rk4 => {
                let (k1, t1) = f.forward(&xs, u);
                let mut x2 = xs.clone();
                x2.scaled_add(0.5 * c, &k1);
                let (k2, t2) = f.forward(&x2, u);
                let mut x3 = xs.clone();
                x3.scaled_add(0.5 * c, &k2);
                let (k3, t3) = f.forward(&x3, u);
                let mut x4 = xs.clone();
                x4.scaled_add(c, &k3);
                let (k4, t4) = f.forward(&x4, u);
                stages.extend([t1, t2, t3, t4]);
                let mut next = xs;
                next.scaled_add(c / 6.0, &k1);
                next.scaled_add(c / 3.0, &k2);
                next.scaled_add(c / 3.0, &k3);
                next.scaled_add(c / 6.0, &k4);
                next
            }
        };
        if let Some(row) = first_non_finite_row(&xs) {
            return Err(BatchFault { row, substep: sub });
        }
    }
    Ok((xs, StepTape { stages }))
}

/// Reverse of [`step_batch`]: `g_next = ∂L/∂x_next` to `∂L/∂x`.
pub fn step_batch_backward<F: BatchField>(
    f: &F,
    tape: &StepTape<F::Tape>,
    cfg: &SolverConfig,
    g_next: Array2<f64>,
    grad: &mut F::Grad,
) -> Array2<f64> {
    let c = cfg.c();
    let mut g = g_next;
    match cfg.method {
        Method::Euler => {
            for t in tape.stages.iter().rev() {
                let d = f.backward(t, &(&g * c), grad);
                g += &d;
            }
        }
        Method::Rk4 => {
            for chunk in tape.stages.chunks(4).rev() {
                let mut gx = g.clone();
                let d4 = f.backward(&chunk[3], &(&g * (c / 6.0)), grad);
                let mut gk3 = &g * (c / 3.0);
                gk3.scaled_add(c, &d4);
                let d3 = f.backward(&chunk[2], &gk3, grad);
                let mut gk2 = &g * (c / 3.0);
                gk2.scaled_add(0.5 * c, &d3);
                let d2 = f.backward(&chunk[1], &gk2, grad);
                let mut gk1 = &g * (c / 6.0);
                gk1.scaled_add(0.5 * c, &d2);
                let d1 = f.backward(&chunk[0], &gk1, grad);
                gx += &d1;
                gx += &d2;
                gx += &d3;
                gx += &d4;
                g = gx;
            }
        }
    }
    g
}

/// `f(x, u) = net([x; u])`, the network form of the state derivative.
#[derive(Debug, Clone, Copy)]
pub struct MlpField<'a> {
    net: &'a Mlp,
    n_x: usize,
}

impl<'a> MlpField<'a> {
    pub fn new(net: &'a Mlp, n_x: usize) -> Self {
        debug_assert_eq!(net.output_dim(), n_x);
        Self { net, n_x }
    }

    fn concat(x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut xu = Vec::with_capacity(x.len() + u.len());
        xu.extend_from_slice(x);
        xu.extend_from_slice(u);
        xu
    }
}

impl VectorField for MlpField<'_> {
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.net.forward(&Self::concat(x, u)).expect("state derivative input width")
    }

    fn vjp(&self, x: &[f64], u: &[f64], g: &[f64], param_grad: &mut [f64]) -> Vec<f64> {
        let mut dxu = self
            .net
            .backward_accumulate(&Self::concat(x, u), g, param_grad)
            .expect("state derivative shapes");
        dxu.truncate(self.n_x);
        dxu
    }
}

impl BatchField for MlpField<'_> {
    type Tape = BatchTape;
    type Grad = Mlp;

    fn forward(&self, x: &Array2<f64>, u: &Array2<f64>) -> (Array2<f64>, BatchTape) {
        let xu = ndarray::concatenate(Axis(1), &[x.view(), u.view()]).expect("batch rows agree");
        self.net.forward_batch(xu)
    }

    fn backward(&self, tape: &BatchTape, g: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let dxu = self.net.backward_batch(tape, g, grad);
        dxu.slice(s![.., ..self.n_x]).to_owned()
    }
}
