//! Metrics, state-scale diagnostics, tau sweeps, loss-smoothness probes and a
//! least-squares state reconstruction oracle.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{fit_normalizer, valid_start_indices, Dataset, SyntheticSystem};
use crate::model::{Architecture, EvalTrace, ModelDims, SubnetModel};
use crate::ode::{Method, MlpField, SolverConfig, VectorField};
use crate::training::{batch_loss, train, TrainConfig, TrainHistory};
use crate::{Error, Result};

/// `sqrt(mean_k ‖y_k − ŷ_k‖² / n_y)`.
pub fn rmse(y: &Array2<f64>, y_hat: &Array2<f64>) -> Result<f64> {
    if y.dim() != y_hat.dim() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", y.dim(), y_hat.dim())));
    }
    if y.is_empty() {
        return Err(Error::invalid("rmse of an empty sequence"));
    }
    let sq: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / y.len() as f64).sqrt())
}

/// RMSE divided by the (population) standard deviation of `y`.
pub fn nrmse(y: &Array2<f64>, y_hat: &Array2<f64>) -> Result<f64> {
    let e = rmse(y, y_hat)?;
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::DegenerateData("measured output is constant".into()));
    }
    Ok(e / std)
}

fn rms<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub nrmse: f64,
    pub rms_x: f64,
    pub rms_f: f64,
    pub n_samples: usize,
    pub trace: EvalTrace,
}

impl EvalReport {
    /// `y0..,y_hat0..` rows of the evaluated samples.
    pub fn write_trace_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n_y = self.trace.measured.ncols();
        let header: Vec<String> = (0..n_y)
            .map(|j| format!("y{j}"))
            .chain((0..n_y).map(|j| format!("y_hat{j}")))
            .collect();
        w.write_record(&header)?;
        for (m, p) in self.trace.measured.rows().into_iter().zip(self.trace.predicted.rows()) {
            w.write_record(m.iter().chain(p.iter()).map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// RMS of the free-run states and of `f(x_k, u_k)` along them (before the
/// `1/tau` factor), both averaged over samples and state components.
pub fn state_rms(m: &SubnetModel, ds: &Dataset) -> Result<(f64, f64)> {
    let tr = m.simulate_free_run(ds)?;
    Ok(state_rms_of_trace(m, ds, &tr)?)
}

fn state_rms_of_trace(m: &SubnetModel, ds: &Dataset, tr: &EvalTrace) -> Result<(f64, f64)> {
    let dsn = m.norm().normalize(ds)?;
    let field = MlpField::new(m.f_net(), m.dims().n_x);
    let states = &tr.states[..tr.states.len() - 1];
    let derivs: Vec<f64> = states
        .iter()
        .enumerate()
        .flat_map(|(k, x)| field.eval(x, &dsn.u.row(tr.start + k).to_vec()))
        .collect();
    Ok((rms(states.iter().flatten()), rms(derivs.iter())))
}

/// Free-run evaluation on `ds`.
pub fn evaluate(m: &SubnetModel, ds: &Dataset) -> Result<EvalReport> {
    let trace = m.simulate_free_run(ds)?;
    let (rms_x, rms_f) = state_rms_of_trace(m, ds, &trace)?;
    Ok(EvalReport {
        rmse: rmse(&trace.measured, &trace.predicted)?,
        nrmse: nrmse(&trace.measured, &trace.predicted)?,
        rms_x,
        rms_f,
        n_samples: trace.len(),
        trace,
    })
}

/// Scale `gamma` and time constant `tau` that give a trajectory unit RMS
/// state and unit RMS normalised derivative, with the resulting RMS values
/// recomputed from the transformed samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauNormalizationReport {
    pub gamma: f64,
    pub tau: f64,
    pub rms_x_tilde: f64,
    pub rms_f_tilde: f64,
}

pub fn verify_theorem2(states: &[Vec<f64>], derivs: &[Vec<f64>]) -> Result<TauNormalizationReport> {
    if states.is_empty() || derivs.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let rms_x = rms(states.iter().flatten());
    let rms_dx = rms(derivs.iter().flatten());
    if !(rms_x > 0.0) || !(rms_dx > 0.0) || !rms_x.is_finite() || !rms_dx.is_finite() {
        return Err(Error::DegenerateData(format!(
            "state RMS {rms_x} and derivative RMS {rms_dx} must both be positive and finite"
        )));
    }
    let gamma = rms_x;
    let tau = rms_x / rms_dx;
    let x_tilde: Vec<f64> = states.iter().flatten().map(|v| v / gamma).collect();
    let f_tilde: Vec<f64> = derivs.iter().flatten().map(|v| tau * v / gamma).collect();
    Ok(TauNormalizationReport {
        gamma,
        tau,
        rms_x_tilde: rms(x_tilde.iter()),
        rms_f_tilde: rms(f_tilde.iter()),
    })
}

/// Train/validation/test datasets of one experiment.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

/// Everything needed to build and train a model apart from `tau` and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ExperimentBase {
    pub n_x: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub arch: Architecture,
    pub method: Method,
    pub substeps: usize,
    pub train: TrainConfig,
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: SubnetModel,
    pub history: TrainHistory,
    pub report: EvalReport,
}

/// Builds a model (normalisation fitted on the training split, networks
/// seeded with `seed`), trains it with training seed `seed` and evaluates it
/// on the test split.
pub fn run_experiment(base: &ExperimentBase, splits: Splits<'_>, tau: f64, seed: u64) -> Result<RunOutcome> {
    let dims = ModelDims {
        n_x: base.n_x,
        n_u: splits.train.n_u(),
        n_y: splits.train.n_y(),
        n_a: base.n_a,
        n_b: base.n_b,
    };
    let solver = SolverConfig::new(base.method, base.substeps, tau, splits.train.dt)?;
    let norm = fit_normalizer(splits.train)?;
    let m0 = SubnetModel::new(dims, &base.arch, solver, norm, base.train.mode, seed)?;
    let cfg = TrainConfig {
        seed,
        ..base.train.clone()
    };
    let (model, history) = train(&m0, splits.train, splits.val, &cfg)?;
    let report = evaluate(&model, splits.test)?;
    Ok(RunOutcome { model, history, report })
}

/// `setting,seed,metric,value` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TidyRow {
    pub setting: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_tidy_csv<W: std::io::Write>(rows: &[TidyRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const SWEEP_METRICS: [&str; 4] = ["rms_x", "rms_f", "test_rmse", "test_nrmse"];

/// Δt/τ values spanning `[1e-3, 10]` at roughly half-decade spacing.
pub fn default_tau_grid() -> Vec<f64> {
    vec![1e-3, 3.2e-3, 1e-2, 3.2e-2, 0.1, 0.32, 1.0, 3.2, 10.0]
}

/// One sweep cell: train at `Δt/τ = dt_over_tau` with `seed` and report the
/// sweep metrics; a failed run yields NaN values.
pub fn sweep_cell(base: &ExperimentBase, splits: Splits<'_>, dt_over_tau: f64, seed: u64) -> Vec<TidyRow> {
    let values = if dt_over_tau > 0.0 && dt_over_tau.is_finite() {
        run_experiment(base, splits, splits.train.dt / dt_over_tau, seed)
            .map(|o| [o.report.rms_x, o.report.rms_f, o.report.rmse, o.report.nrmse])
            .unwrap_or([f64::NAN; 4])
    } else {
        [f64::NAN; 4]
    };
    SWEEP_METRICS
        .iter()
        .zip(values)
        .map(|(metric, value)| TidyRow {
            setting: dt_over_tau.to_string(),
            seed,
            metric: metric.to_string(),
            value,
        })
        .collect()
}

/// Every `(Δt/τ, seed)` combination, grid-major.
pub fn tau_sweep(base: &ExperimentBase, splits: Splits<'_>, grid: &[f64], seeds: &[u64]) -> Result<Vec<TidyRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("tau sweep needs at least one grid value and one seed"));
    }
    Ok(grid
        .iter()
        .flat_map(|&g| seeds.iter().flat_map(move |&s| sweep_cell(base, splits, g, s)))
        .collect())
}

/// Local Lipschitz estimate of the truncated loss for one subsection length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeEstimate {
    #[serde(rename = "T")]
    pub t: usize,
    pub lipschitz: f64,
    pub probes_used: usize,
    pub probes_skipped: usize,
}

/// For each `T`, `max_d |V(θ + εd) − V(θ)| / ε` over `n_probes` random unit
/// directions `d`, where `V` is the truncated loss over every valid
/// subsection. Directions are drawn once from `seed` and reused for every
/// `T`; `mask`, when given, zeroes the excluded parameter coordinates before
/// normalising. Probes whose simulation faults are skipped and counted.
pub fn smoothness_probe(
    m: &SubnetModel,
    ds: &Dataset,
    t_values: &[usize],
    n_probes: usize,
    eps: f64,
    seed: u64,
    mask: Option<&[bool]>,
) -> Result<Vec<ProbeEstimate>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if n_probes == 0 {
        return Err(Error::invalid("n_probes must be at least 1"));
    }
    let theta = m.flat_params().values;
    if let Some(mask) = mask {
        if mask.len() != theta.len() {
            return Err(Error::invalid(format!("mask has {} entries, model has {}", mask.len(), theta.len())));
        }
        if !mask.iter().any(|b| *b) {
            return Err(Error::invalid("mask excludes every parameter"));
        }
    }
    let dims = m.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Vec<f64>> = (0..n_probes)
        .map(|_| {
            let mut d: Vec<f64> = (0..theta.len())
                .map(|i| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    if mask.is_none_or(|mk| mk[i]) { v } else { 0.0 }
                })
                .collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            d
        })
        .collect();
    let dsn = m.norm().normalize(ds)?;
    let mut out = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let starts = valid_start_indices(dsn.len(), t, dims.n_a, dims.n_b)?;
        let base = batch_loss(m, &dsn, &starts, t, false)?.0;
        let mut best = 0.0f64;
        let mut used = 0;
        let mut skipped = 0;
        let mut probe = m.clone();
        for d in &directions {
            let shifted: Vec<f64> = theta.iter().zip(d).map(|(a, b)| a + eps * b).collect();
            let value = probe
                .set_flat_params(&shifted)
                .and_then(|_| batch_loss(&probe, &dsn, &starts, t, false).map(|r| r.0));
            match value {
                Ok(v) if v.is_finite() => {
                    best = best.max((v - base).abs() / eps);
                    used += 1;
                }
                Ok(_) | Err(Error::NumericFault(_)) | Err(Error::NonFinite(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        out.push(ProbeEstimate {
            t,
            lipschitz: best,
            probes_used: used,
            probes_skipped: skipped,
        });
    }
    Ok(out)
}

/// Sampled dynamics that can be run one sample interval backwards.
pub trait ReconstructionDynamics {
    fn n_x(&self) -> usize;
    fn n_y(&self) -> usize;
    /// State one sample earlier, given the current state and the input held
    /// over the preceding interval.
    fn step_back(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>>;
    fn output(&self, x: &[f64]) -> Vec<f64>;
}

/// A synthetic system sampled at `dt`, integrated backwards with RK4.
#[derive(Debug, Clone)]
pub struct SampledSystem<'a> {
    pub system: &'a SyntheticSystem,
    pub dt: f64,
    pub substeps: usize,
}

impl ReconstructionDynamics for SampledSystem<'_> {
    fn n_x(&self) -> usize {
        self.system.n_x()
    }

    fn n_y(&self) -> usize {
        self.system.n_y()
    }

    fn step_back(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.system.advance(x, u, -self.dt, self.substeps)
    }

    fn output(&self, x: &[f64]) -> Vec<f64> {
        self.system.output(x)
    }
}

/// Axis-aligned search box for the multi-start grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StateBox {
    /// `center ± 3·scale` per dimension.
    pub fn around(center: &[f64], scale: &[f64]) -> Self {
        Self {
            lower: center.iter().zip(scale).map(|(c, s)| c - 3.0 * s).collect(),
            upper: center.iter().zip(scale).map(|(c, s)| c + 3.0 * s).collect(),
        }
    }

    /// `round(27^(1/n))` equally spaced points per dimension, endpoints included.
    fn grid(&self) -> Vec<Vec<f64>> {
        let n = self.lower.len();
        let per = (27f64.powf(1.0 / n as f64)).round().max(1.0) as usize;
        let axis = |i: usize| -> Vec<f64> {
            if per == 1 {
                return vec![0.5 * (self.lower[i] + self.upper[i])];
            }
            (0..per)
                .map(|j| self.lower[i] + (self.upper[i] - self.lower[i]) * j as f64 / (per - 1) as f64)
                .collect()
        };
        let mut points = vec![Vec::with_capacity(n)];
        for i in 0..n {
            let ax = axis(i);
            points = points
                .into_iter()
                .flat_map(|p| {
                    ax.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub state: Vec<f64>,
    /// Final residual norm `‖Y − H(x̂)‖`.
    pub residual: f64,
    pub converged_starts: usize,
    pub total_starts: usize,
}

const GN_STEP_TOL: f64 = 1e-10;
const GN_MAX_ITER: usize = 100;

/// Stacked `y_{n−1} − h(x_{n−1}), .., y_{n−z} − h(x_{n−z})` with the states
/// obtained by stepping back from `x`.
fn window_residual<D: ReconstructionDynamics>(
    d: &D,
    x: &[f64],
    u: &Array2<f64>,
    y: &Array2<f64>,
    n: usize,
    z: usize,
) -> Option<DVector<f64>> {
    let n_y = d.n_y();
    let mut r = DVector::zeros(z * n_y);
    let mut state = x.to_vec();
    for j in 1..=z {
        state = d.step_back(&state, &u.row(n - j).to_vec()).ok()?;
        let out = d.output(&state);
        for c in 0..n_y {
            r[(j - 1) * n_y + c] = y[[n - j, c]] - out[c];
        }
    }
    r.iter().all(|v| v.is_finite()).then_some(r)
}

/// Gauss–Newton from one start; `Some((x, ‖r‖))` on convergence.
fn gauss_newton<D: ReconstructionDynamics>(
    d: &D,
    start: &[f64],
    u: &Array2<f64>,
    y: &Array2<f64>,
    n: usize,
    z: usize,
) -> Option<(Vec<f64>, f64)> {
    let n_x = d.n_x();
    let mut x = start.to_vec();
    let mut r = window_residual(d, &x, u, y, n, z)?;
    for _ in 0..GN_MAX_ITER {
        // Jacobian of the residual by central differences
        let mut jac = DMatrix::zeros(r.len(), n_x);
        for i in 0..n_x {
            let h = 1e-7 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let rp = window_residual(d, &xp, u, y, n, z)?;
            let rm = window_residual(d, &xm, u, y, n, z)?;
            jac.set_column(i, &((rp - rm) / (2.0 * h)));
        }
        let step = jac.svd(true, true).solve(&(-&r), 1e-12).ok()?;
        let cost = r.norm();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
            if let Some(rc) = window_residual(d, &cand, u, y, n, z) {
                if rc.norm() < cost {
                    accepted = Some((cand, rc));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, rc)) => {
                let moved = step.norm() * alpha;
                x = cand;
                r = rc;
                if moved < GN_STEP_TOL {
                    return Some((x, r.norm()));
                }
            }
            // no decrease along the Gauss–Newton direction: a stationary point
            None => return Some((x, cost)),
        }
    }
    None
}

/// Least-squares estimate of the state at sample `n` from the `z` preceding
/// outputs and inputs, `argmin ‖y_{n−1..n−z} − h(x_{n−1..n−z})‖`, with the
/// earlier states obtained by integrating the dynamics backwards from the
/// candidate. Gauss–Newton is started from every point of a grid over
/// `search`; the converged solution with the smallest residual is returned.
pub fn reconstruct_oracle<D: ReconstructionDynamics>(
    dynamics: &D,
    u: &Array2<f64>,
    y: &Array2<f64>,
    n: usize,
    z: usize,
    search: &StateBox,
) -> Result<Reconstruction> {
    let (n_x, n_y) = (dynamics.n_x(), dynamics.n_y());
    if z * n_y < n_x {
        return Err(Error::ObservabilityViolation { rows: z * n_y, n_x });
    }
    if n < z || n > y.nrows() || u.nrows() != y.nrows() || y.ncols() != n_y {
        return Err(Error::invalid(format!(
            "window of {z} samples before n={n} does not fit {} samples of {} outputs",
            y.nrows(),
            y.ncols()
        )));
    }
    if search.lower.len() != n_x || search.upper.len() != n_x {
        return Err(Error::invalid("search box dimension differs from the state dimension"));
    }
    let starts = search.grid();
    let total = starts.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut converged = 0;
    for s in starts {
        if let Some((x, cost)) = gauss_newton(dynamics, &s, u, y, n, z) {
            converged += 1;
            if best.as_ref().is_none_or(|(_, c)| cost < *c) {
                best = Some((x, cost));
            }
        }
    }
    match best {
        Some((state, residual)) => Ok(Reconstruction {
            state,
            residual,
            converged_starts: converged,
            total_starts: total,
        }),
        None => Err(Error::NoSolution(format!("Gauss-Newton did not converge from any of {total} starts"))),
    }
}

/// Least-squares affine map `target ≈ A·source + b`, used to compare state
/// estimates that live in a different coordinate system from the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    /// `target_dim × source_dim`.
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn fit(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Self> {
        let (Some(s0), Some(t0)) = (source.first(), target.first()) else {
            return Err(Error::invalid("affine fit needs at least one pair"));
        };
        let (n_s, n_t) = (s0.len(), t0.len());
        if source.len() != target.len()
            || source.iter().any(|v| v.len() != n_s)
            || target.iter().any(|v| v.len() != n_t)
        {
            return Err(Error::invalid("affine fit needs equally many, equally sized vectors"));
        }
        if source.len() <= n_s {
            return Err(Error::invalid(format!("affine fit of {n_s} inputs needs more than {n_s} pairs")));
        }
        let design = DMatrix::from_fn(source.len(), n_s + 1, |r, c| if c < n_s { source[r][c] } else { 1.0 });
        let rhs = DMatrix::from_fn(target.len(), n_t, |r, c| target[r][c]);
        let coef = design
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::NoSolution(e.to_string()))?;
        Ok(Self {
            matrix: coef.rows(0, n_s).transpose(),
            offset: coef.row(n_s).transpose(),
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x) + &self.offset).iter().copied().collect()
    }
}

/// RMS over samples of the Euclidean distance between paired vectors.
pub fn rms_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let sq: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .collect();
    rms(sq.iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, NormStats, SyntheticConfig, SystemKind};
    use crate::model::Mode;
    use crate::nnmath::{Dense, Mlp};
    use ndarray::{array, Array1};
    use rand::Rng;

    #[test]
    fn rmse_cases() {
        let y = array![[1.0], [2.0], [3.0]];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(rmse(&array![[0.0], [0.0]], &array![[1.0], [-1.0]]).unwrap(), 1.0);
        let v = rmse(&y, &array![[1.1], [1.9], [3.2]]).unwrap();
        assert!((v - (0.06f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((v - 0.1414213562373095).abs() < 1e-12);
        assert!(rmse(&y, &array![[1.0], [2.0]]).is_err());
    }

    #[test]
    fn rmse_averages_over_channels() {
        let y = array![[0.0, 0.0]];
        assert!((rmse(&y, &array![[3.0, 4.0]]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rmse_ignores_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Array2::from_shape_fn((50, 2), |_| rng.random_range(-1.0..1.0));
        let yh = Array2::from_shape_fn((50, 2), |_| rng.random_range(-1.0..1.0));
        let perm: Vec<usize> = (0..50).rev().collect();
        let py = y.select(ndarray::Axis(0), &perm);
        let pyh = yh.select(ndarray::Axis(0), &perm);
        assert!((rmse(&y, &yh).unwrap() - rmse(&py, &pyh).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn theorem2_constant_state() {
        let states = vec![vec![-2.5]; 7];
        let derivs: Vec<Vec<f64>> = (0..7).map(|k| vec![k as f64 - 2.0]).collect();
        let r = verify_theorem2(&states, &derivs).unwrap();
        assert_eq!(r.gamma, 2.5);
        assert_eq!(r.rms_x_tilde, 1.0);
    }

    #[test]
    fn theorem2_sinusoid() {
        let states: Vec<Vec<f64>> = (0..1000).map(|k| vec![2.0 * (k as f64 / 10.0).sin()]).collect();
        let derivs: Vec<Vec<f64>> = (0..1000).map(|k| vec![2.0 * (k as f64 / 10.0).cos()]).collect();
        let r = verify_theorem2(&states, &derivs).unwrap();
        assert!((r.rms_x_tilde - 1.0).abs() < 1e-12);
        assert!((r.rms_f_tilde - 1.0).abs() < 1e-12);
        assert!(r.gamma > 0.0 && r.tau > 0.0);
    }

    #[test]
    fn theorem2_rejects_zero_trajectories() {
        let zeros = vec![vec![0.0, 0.0]; 4];
        let ones = vec![vec![1.0, 1.0]; 4];
        assert!(matches!(verify_theorem2(&zeros, &ones), Err(Error::DegenerateData(_))));
        assert!(matches!(verify_theorem2(&ones, &zeros), Err(Error::DegenerateData(_))));
    }

    fn linear_net(w: Array2<f64>) -> Mlp {
        Mlp::from_parts(
            vec![Dense {
                bias: Array1::zeros(w.nrows()),
                weight: w,
            }],
            None,
        )
        .unwrap()
    }

    fn ds_1x1(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
        Dataset::new(u, y, 1.0, "r").unwrap()
    }

    #[test]
    fn state_rms_cases() {
        let dims = ModelDims {
            n_x: 2,
            n_u: 1,
            n_y: 1,
            n_a: 0,
            n_b: 0,
        };
        let solver = SolverConfig::rk4(1.0, 1.0).unwrap();
        let ds = ds_1x1(20, 1);
        let frozen = |x0: &[f64]| {
            SubnetModel::with_fixed_initial_state(
                dims,
                linear_net(Array2::zeros((2, 3))),
                linear_net(Array2::zeros((1, 2))),
                x0,
                solver,
                NormStats::identity(1, 1),
                Mode::Ct,
            )
            .unwrap()
        };
        assert_eq!(state_rms(&frozen(&[0.0, 0.0]), &ds).unwrap(), (0.0, 0.0));
        assert_eq!(state_rms(&frozen(&[1.0, 1.0]), &ds).unwrap().0, 1.0);

        let m = SubnetModel::new(
            ModelDims { n_a: 2, n_b: 2, ..dims },
            &Architecture {
                hidden: vec![5],
                bypass: true,
            },
            solver,
            NormStats::identity(1, 1),
            Mode::Ct,
            4,
        )
        .unwrap();
        let (rx, rf) = state_rms(&m, &ds).unwrap();
        let tr = m.simulate_free_run(&ds).unwrap();
        let mut sx = 0.0;
        let mut sf = 0.0;
        let k_max = tr.states.len() - 1;
        for k in 0..k_max {
            let x = &tr.states[k];
            let f = m.f_net().forward(&[x[0], x[1], ds.u[[tr.start + k, 0]]]).unwrap();
            sx += x[0] * x[0] + x[1] * x[1];
            sf += f[0] * f[0] + f[1] * f[1];
        }
        assert!((rx - (sx / (2 * k_max) as f64).sqrt()).abs() < 1e-14);
        assert!((rf - (sf / (2 * k_max) as f64).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn tidy_csv_layout() {
        let rows = vec![
            TidyRow {
                setting: "0.032".into(),
                seed: 1,
                metric: "rms_x".into(),
                value: 0.5,
            },
            TidyRow {
                setting: "0.032".into(),
                seed: 1,
                metric: "test_rmse".into(),
                value: f64::NAN,
            },
        ];
        let mut out = Vec::new();
        write_tidy_csv(&rows, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "setting,seed,metric,value\n0.032,1,rms_x,0.5\n0.032,1,test_rmse,NaN\n"
        );
    }

    #[test]
    fn default_grid_contains_cct_setting() {
        let g = default_tau_grid();
        assert!(g.contains(&0.032));
        assert_eq!(g.first(), Some(&1e-3));
        assert_eq!(g.last(), Some(&10.0));
    }

    fn quick_base() -> ExperimentBase {
        ExperimentBase {
            n_x: 2,
            n_a: 3,
            n_b: 3,
            arch: Architecture {
                hidden: vec![8],
                bypass: true,
            },
            method: Method::Rk4,
            substeps: 1,
            train: TrainConfig {
                t: 8,
                batch_size: 8,
                max_updates: 30,
                eval_every: 10,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn single_cell_sweep_matches_plain_run() {
        let mut cfg = SyntheticConfig::new(SystemKind::Linear2, 120, 1.0);
        cfg.noise_std = 0.01;
        let (train_ds, _) = generate_synthetic(&cfg).unwrap();
        cfg.input.seed = 1;
        let (test, _) = generate_synthetic(&cfg).unwrap();
        let splits = Splits {
            train: &train_ds,
            val: &test,
            test: &test,
        };
        let base = quick_base();
        let rows = tau_sweep(&base, splits, &[0.5], &[7]).unwrap();
        assert_eq!(rows.len(), SWEEP_METRICS.len());
        let plain = run_experiment(&base, splits, 1.0 / 0.5, 7).unwrap().report;
        let expect = [plain.rms_x, plain.rms_f, plain.rmse, plain.nrmse];
        for (r, e) in rows.iter().zip(expect) {
            assert_eq!(r.value, e, "{}", r.metric);
            assert_eq!(r.setting, "0.5");
        }
        // a failing cell turns into NaN rows
        let bad = sweep_cell(&base, splits, 0.0, 7);
        assert!(bad.iter().all(|r| r.value.is_nan()));
        assert!(tau_sweep(&base, splits, &[], &[1]).is_err());
    }

    #[test]
    fn probing_dead_parameters_gives_zero() {
        let dims = ModelDims {
            n_x: 2,
            n_u: 1,
            n_y: 1,
            n_a: 2,
            n_b: 2,
        };
        let mut m = SubnetModel::new(
            dims,
            &Architecture {
                hidden: vec![4],
                bypass: true,
            },
            SolverConfig::rk4(1.0, 1.0).unwrap(),
            NormStats::identity(1, 1),
            Mode::Ct,
            2,
        )
        .unwrap();
        let nf = m.f_net().param_count();
        let nh = m.h_net().param_count();
        let mut theta = m.flat_params().values;
        theta[..nf + nh].iter_mut().for_each(|v| *v = 0.0);
        m.set_flat_params(&theta).unwrap();
        // with h ≡ 0 the loss does not depend on f or psi; probe only those
        let mask: Vec<bool> = (0..theta.len()).map(|i| i < nf || i >= nf + nh).collect();
        let est = smoothness_probe(&m, &ds_1x1(60, 3), &[4, 16], 6, 1e-4, 0, Some(&mask)).unwrap();
        assert!(est.iter().all(|e| e.lipschitz == 0.0 && e.probes_used == 6));
    }

    #[test]
    fn scalar_linear_rollout_sensitivity_grows() {
        // x⁺ = a x, y = x; probing only the coefficient a
        let dims = ModelDims {
            n_x: 1,
            n_u: 1,
            n_y: 1,
            n_a: 1,
            n_b: 0,
        };
        let a = 0.98;
        let m = SubnetModel::from_nets(
            dims,
            linear_net(array![[a, 0.0]]),
            linear_net(array![[1.0]]),
            linear_net(array![[1.0]]),
            SolverConfig::rk4(1.0, 1.0).unwrap(),
            NormStats::identity(1, 1),
            Mode::Dt,
        )
        .unwrap();
        let n = 200;
        let y = Array2::from_shape_fn((n, 1), |(k, _)| 1.0 + 0.1 * (k as f64 * 0.3).sin());
        let ds = Dataset::new(Array2::zeros((n, 1)), y, 1.0, "s").unwrap();
        let mut mask = vec![false; m.param_count()];
        mask[0] = true;
        let est = smoothness_probe(&m, &ds, &[8, 64], 1, 1e-6, 0, Some(&mask)).unwrap();
        assert!(est[1].lipschitz > est[0].lipschitz, "{est:?}");
        // the endpoint sensitivity d(a^T x0)/da = T a^(T-1) x0 also grows
        assert!(64.0 * a.powi(63) > 8.0 * a.powi(7));
    }

    #[test]
    fn affine_fit_recovers_exact_map() {
        let src: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64, (k * k) as f64 * 0.1]).collect();
        let tgt: Vec<Vec<f64>> = src.iter().map(|v| vec![2.0 * v[0] - v[1] + 1.0, 0.5 * v[1] - 3.0]).collect();
        let map = AffineMap::fit(&src, &tgt).unwrap();
        let mapped: Vec<Vec<f64>> = src.iter().map(|v| map.apply(v)).collect();
        assert!(rms_distance(&mapped, &tgt) < 1e-10);
        assert!(AffineMap::fit(&src[..2], &tgt[..2]).is_err());
        assert_eq!(rms_distance(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[vec![3.0, 4.0], vec![0.0, 0.0]]), 12.5f64.sqrt());
    }

    struct ScalarDecay;

    impl ReconstructionDynamics for ScalarDecay {
        fn n_x(&self) -> usize {
            1
        }
        fn n_y(&self) -> usize {
            1
        }
        fn step_back(&self, x: &[f64], _u: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![x[0] / 0.9])
        }
        fn output(&self, x: &[f64]) -> Vec<f64> {
            x.to_vec()
        }
    }

    #[test]
    fn scalar_linear_inversion() {
        let y = array![[2.0], [1.8], [1.62]];
        let u = Array2::zeros((3, 1));
        let box_ = StateBox {
            lower: vec![-3.0],
            upper: vec![3.0],
        };
        let r = reconstruct_oracle(&ScalarDecay, &u, &y, 3, 1, &box_).unwrap();
        assert!((r.state[0] - 0.9 * 1.62).abs() < 1e-9, "{:?}", r.state);
        assert_eq!(r.total_starts, 27);
    }

    #[test]
    fn tanks_reconstruction_and_observability() {
        let mut cfg = SyntheticConfig::new(SystemKind::CascadedTanks, 200, 4.0);
        cfg.noise_std = 0.0;
        cfg.input.amplitude = Some(0.5);
        let (ds, truth) = generate_synthetic(&cfg).unwrap();
        let sys = SyntheticSystem::new(SystemKind::CascadedTanks, &cfg.params).unwrap();
        let d = SampledSystem {
            system: &sys,
            dt: cfg.dt,
            substeps: cfg.truth_substeps,
        };
        let col = |j: usize| truth.states.column(j).to_vec();
        let stats = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
        };
        let (m0, s0) = stats(col(0));
        let (m1, s1) = stats(col(1));
        let search = StateBox::around(&[m0, m1], &[s0, s1]);
        for n in [120, 150, 180] {
            let r = reconstruct_oracle(&d, &ds.u, &ds.y, n, 3, &search).unwrap();
            let err = ((r.state[0] - truth.states[[n, 0]]).powi(2) + (r.state[1] - truth.states[[n, 1]]).powi(2)).sqrt();
            assert!(err <= 1e-3, "n={n}: err {err}, {r:?}");
        }
        assert!(matches!(
            reconstruct_oracle(&d, &ds.u, &ds.y, 150, 1, &search),
            Err(Error::ObservabilityViolation { rows: 1, n_x: 2 })
        ));
    }
}
