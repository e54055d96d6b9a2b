//! Truncated subsection loss, full simulation loss, the training loop and
//! the choice of the state-derivative scale `1/tau`.
//!
//! The truncated loss runs a whole batch of subsections in lockstep on
//! `(batch, width)` matrices. The full simulation loss follows a single
//! trajectory sample by sample; the two share no forward or backward code
//! beyond the network definitions.

use std::time::{Duration, Instant};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{valid_start_indices, BatchSampler, Dataset};
use crate::eval::rmse;
use crate::model::{encoder_window, Mode, SubnetModel};
use crate::nnmath::{AdamConfig, AdamState, BatchTape, FlatParams};
use crate::ode::{ode_step_vjp, step_batch, step_batch_backward, MlpField, StepTape, VectorField};
use crate::{Error, FaultLocation, Result};

/// What the optimiser minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTarget {
    /// Mean error of many encoder-initialised subsections of length `T`.
    #[default]
    Truncated,
    /// Error of one simulation over the whole training set from a learned
    /// initial state.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Subsection length.
    #[serde(rename = "T")]
    pub t: usize,
    pub batch_size: usize,
    pub max_updates: usize,
    /// Updates between validation simulations.
    pub eval_every: usize,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mode: Mode,
    pub loss_target: LossTarget,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t: 30,
            batch_size: 64,
            max_updates: 50_000,
            eval_every: 100,
            patience: 20,
            adam: AdamConfig::default(),
            seed: 0,
            mode: Mode::Ct,
            loss_target: LossTarget::Truncated,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(Error::invalid("T must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.patience < 1 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.eval_every < 1 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        let a = &self.adam;
        if ![a.lr, a.beta1, a.beta2, a.eps].iter().all(|v| *v > 0.0 && v.is_finite()) || a.beta1 >= 1.0 || a.beta2 >= 1.0
        {
            return Err(Error::invalid("Adam lr and eps must be positive, betas in (0, 1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Per-batch forward state kept for the backward pass.
enum StepRecord {
    Ct(StepTape<BatchTape>),
    Dt(BatchTape),
}

fn gather_rows(src: &Array2<f64>, rows: impl Iterator<Item = usize>, width: usize) -> Array2<f64> {
    let rows: Vec<usize> = rows.collect();
    let mut out = Array2::zeros((rows.len(), width));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&src.row(r));
    }
    out
}

/// Loss (and optionally gradient in [`SubnetModel::flat_params`] layout) of
/// a batch of subsections on an already normalised dataset.
pub(crate) fn batch_loss(
    m: &SubnetModel,
    dsn: &Dataset,
    batch: &[usize],
    t: usize,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let dims = m.dims();
    if t < 1 {
        return Err(Error::invalid("T must be at least 1"));
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if dsn.n_u() != dims.n_u || dsn.n_y() != dims.n_y {
        return Err(Error::invalid("dataset channels do not match the model"));
    }
    if let Some(&n) = batch.iter().find(|&&n| n < dims.lag() || n + t > dsn.len()) {
        return Err(Error::invalid(format!(
            "start index {n} invalid for T={t}, N={}, lag {}",
            dsn.len(),
            dims.lag()
        )));
    }
    let b = batch.len();
    let mut windows = Array2::zeros((b, dims.window_len()));
    for (i, &n) in batch.iter().enumerate() {
        let w = encoder_window(dsn, n, dims.n_a, dims.n_b)?;
        windows.row_mut(i).iter_mut().zip(w).for_each(|(d, v)| *d = v);
    }

    let field = MlpField::new(m.f_net(), dims.n_x);
    let scale = 1.0 / (b * t) as f64;
    let (mut x, psi_tape) = m.psi_net().forward_batch(windows);
    let mut h_tapes = Vec::with_capacity(t);
    let mut dys = Vec::with_capacity(t);
    let mut steps = Vec::with_capacity(t.saturating_sub(1));
    let mut loss = 0.0;
    for k in 0..t {
        let fault = |row: usize, substep: usize| {
            Error::NumericFault(FaultLocation {
                start: Some(batch[row]),
                step: k,
                substep,
            })
        };
        let (yhat, h_tape) = m.h_net().forward_batch(x.clone());
        let target = gather_rows(&dsn.y, batch.iter().map(|n| n + k), dims.n_y);
        let resid = yhat - target;
        if let Some(row) = resid.axis_iter(Axis(0)).position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(fault(row, 0));
        }
        loss += resid.iter().map(|v| v * v).sum::<f64>();
        if with_grad {
            h_tapes.push(h_tape);
            dys.push(resid * (2.0 * scale));
        }
        if k + 1 == t {
            break;
        }
        let u = gather_rows(&dsn.u, batch.iter().map(|n| n + k), dims.n_u);
        match m.mode() {
            Mode::Ct => {
                let (next, tape) = step_batch(&field, &x, &u, m.solver()).map_err(|f| fault(f.row, f.substep))?;
                x = next;
                if with_grad {
                    steps.push(StepRecord::Ct(tape));
                }
            }
            Mode::Dt => {
                let xu = ndarray::concatenate(Axis(1), &[x.view(), u.view()]).expect("matching rows");
                let (next, tape) = m.f_net().forward_batch(xu);
                if let Some(row) = next.axis_iter(Axis(0)).position(|r| r.iter().any(|v| !v.is_finite())) {
                    return Err(fault(row, 0));
                }
                x = next;
                if with_grad {
                    steps.push(StepRecord::Dt(tape));
                }
            }
        }
    }
    let loss = loss * scale;
    if !with_grad {
        return Ok((loss, None));
    }

    let mut gf = m.f_net().zeros_like();
    let mut gh = m.h_net().zeros_like();
    let mut gpsi = m.psi_net().zeros_like();
    let mut g = Array2::<f64>::zeros((b, dims.n_x));
    for k in (0..t).rev() {
        if k + 1 < t {
            g = match &steps[k] {
                StepRecord::Ct(tape) => step_batch_backward(&field, tape, m.solver(), g, &mut gf),
                StepRecord::Dt(tape) => {
                    let gxu = m.f_net().backward_batch(tape, &g, &mut gf);
                    gxu.slice(s![.., ..dims.n_x]).to_owned()
                }
            };
        }
        g += &m.h_net().backward_batch(&h_tapes[k], &dys[k], &mut gh);
    }
    m.psi_net().backward_batch(&psi_tape, &g, &mut gpsi);
    Ok((loss, Some(SubnetModel::concat_grads(&gf, &gh, &gpsi))))
}

/// Mean over `batch` of `(1/T) Σ_k ‖y_{n+k} − ŷ_{n+k|n}‖²` on normalised
/// outputs, with its exact gradient over all three networks.
pub fn truncated_loss_and_grad(m: &SubnetModel, ds: &Dataset, batch: &[usize], t: usize) -> Result<(f64, FlatParams)> {
    let dsn = m.norm().normalize(ds)?;
    let (loss, grad) = batch_loss(m, &dsn, batch, t, true)?;
    Ok((loss, FlatParams::new(grad.expect("requested"), m.param_layout())?))
}

/// Loss only, see [`truncated_loss_and_grad`].
pub fn truncated_loss(m: &SubnetModel, ds: &Dataset, batch: &[usize], t: usize) -> Result<f64> {
    let dsn = m.norm().normalize(ds)?;
    Ok(batch_loss(m, &dsn, batch, t, false)?.0)
}

/// Full simulation loss and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FullSimGrad {
    pub loss: f64,
    /// Gradient in [`SubnetModel::flat_params`] layout; the encoder entries
    /// are zero because the encoder is not used.
    pub theta: FlatParams,
    /// Gradient with respect to the initial state.
    pub x0: Vec<f64>,
}

/// `(1/N) Σ_k ‖y_k − h(x_k)‖²` over the whole (normalised) dataset for one
/// simulation starting from the normalised state `x0` at sample 0.
pub fn full_sim_loss(m: &SubnetModel, ds: &Dataset, x0: &[f64]) -> Result<FullSimGrad> {
    let dims = m.dims();
    if x0.len() != dims.n_x {
        return Err(Error::invalid(format!("x0 has {} entries, n_x is {}", x0.len(), dims.n_x)));
    }
    let dsn = m.norm().normalize(ds)?;
    let n = dsn.len();
    let mut xs = Vec::with_capacity(n);
    xs.push(x0.to_vec());
    let mut resid = Vec::with_capacity(n);
    let mut loss = 0.0;
    for k in 0..n {
        let x = &xs[k];
        let y = m.output(x)?;
        let r: Vec<f64> = y.iter().zip(dsn.y.row(k)).map(|(a, b)| a - b).collect();
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault(FaultLocation {
                start: Some(0),
                step: k,
                substep: 0,
            }));
        }
        loss += r.iter().map(|v| v * v).sum::<f64>();
        resid.push(r);
        if k + 1 < n {
            let next = m.advance(x, &dsn.u.row(k).to_vec()).map_err(|e| e.at_subsection(0, k))?;
            xs.push(next);
        }
    }
    let scale = 1.0 / n as f64;

    let nf = m.f_net().param_count();
    let nh = m.h_net().param_count();
    let mut grad = vec![0.0; m.param_count()];
    let (gf, rest) = grad.split_at_mut(nf);
    let gh = &mut rest[..nh];
    let field = MlpField::new(m.f_net(), dims.n_x);
    let mut g = vec![0.0; dims.n_x];
    for k in (0..n).rev() {
        let u = dsn.u.row(k).to_vec();
        if k + 1 < n {
            g = match m.mode() {
                Mode::Ct => ode_step_vjp(&field, &xs[k], &u, m.solver(), &g, gf),
                Mode::Dt => {
                    let mut xu = xs[k].clone();
                    xu.extend_from_slice(&u);
                    let gxu = m.f_net().backward_accumulate(&xu, &g, gf)?;
                    gxu[..dims.n_x].to_vec()
                }
            };
        }
        let dy: Vec<f64> = resid[k].iter().map(|r| 2.0 * scale * r).collect();
        let gx = m.h_net().backward_accumulate(&xs[k], &dy, gh)?;
        g.iter_mut().zip(gx).for_each(|(a, b)| *a += b);
    }
    Ok(FullSimGrad {
        loss: loss * scale,
        theta: FlatParams::new(grad, m.param_layout())?,
        x0: g,
    })
}

/// One validation point of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub update: usize,
    /// Mean batch loss since the previous record; NaN before the first update.
    pub train_loss: f64,
    /// Free-run RMSE on the validation set in physical units; NaN if the
    /// simulation failed.
    pub val_rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxUpdates,
    Patience,
    NumericFaults,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
    /// JSON of the returned model.
    pub best_checkpoint: String,
    pub best_update: usize,
    pub best_val_rmse: f64,
    pub stop_reason: StopReason,
    /// Batches whose update was skipped because of a numeric fault.
    pub skipped_batches: usize,
    pub wall_time: Duration,
}

impl TrainHistory {
    /// `update,train_loss,val_rmse` rows, one per record.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["update", "train_loss", "val_rmse"])?;
        for r in &self.records {
            w.write_record([r.update.to_string(), r.train_loss.to_string(), r.val_rmse.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Free-run RMSE of `m` on `ds` in physical units.
pub fn validation_rmse(m: &SubnetModel, ds: &Dataset) -> Result<f64> {
    let tr = m.simulate_free_run(ds)?;
    rmse(&tr.measured, &tr.predicted)
}

fn clip_global_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

const MAX_CONSECUTIVE_FAULTS: usize = 3;

/// Adam on the configured loss with periodic free-run validation; returns
/// the model with the lowest validation RMSE.
///
/// The model is trained in `cfg.mode`. With [`LossTarget::Full`] the encoder
/// is replaced by a learned initial state that starts at zero.
pub fn train(
    m0: &SubnetModel,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SubnetModel, TrainHistory)> {
    let started = Instant::now();
    cfg.validate()?;
    let mut model = m0.clone();
    model.set_mode(cfg.mode);
    if cfg.loss_target == LossTarget::Full && model.fixed_initial_state().is_none() {
        let n_x = model.dims().n_x;
        model = model.into_fixed_initial_state(&vec![0.0; n_x])?;
    }
    let dims = model.dims();
    let dsn = model.norm().normalize(train_ds)?;
    if val_ds.len() <= dims.lag() {
        return Err(Error::invalid(format!(
            "validation set of {} samples is too short for encoder lag {}",
            val_ds.len(),
            dims.lag()
        )));
    }
    let mut sampler = match cfg.loss_target {
        LossTarget::Truncated => Some(BatchSampler::new(
            valid_start_indices(dsn.len(), cfg.t, dims.n_a, dims.n_b)?,
            cfg.seed,
        )?),
        LossTarget::Full => None,
    };

    let mut theta = model.flat_params().values;
    let mut adam = AdamState::new(theta.len(), cfg.adam);
    let x0_offset = theta.len() - dims.n_x;

    let val0 = validation_rmse(&model, val_ds).unwrap_or(f64::NAN);
    let mut records = vec![EvalRecord {
        update: 0,
        train_loss: f64::NAN,
        val_rmse: val0,
    }];
    let mut best = (model.clone(), 0usize, val0);
    let mut stale = 0;
    let mut faults_in_a_row = 0;
    let mut skipped = 0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stop_reason = StopReason::MaxUpdates;

    for update in 1..=cfg.max_updates {
        let step = match &mut sampler {
            Some(s) => {
                let batch = s.next_batch(cfg.batch_size)?;
                batch_loss(&model, &dsn, &batch, cfg.t, true).map(|(l, g)| (l, g.expect("requested")))
            }
            None => {
                let x0 = model.fixed_initial_state().expect("fixed-state model");
                full_sim_loss(&model, train_ds, &x0).map(|fg| {
                    let mut g = fg.theta.values;
                    g[x0_offset..].copy_from_slice(&fg.x0);
                    (fg.loss, g)
                })
            }
        };
        let applied = match step {
            Ok((loss, mut grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                if let Some(c) = cfg.grad_clip {
                    clip_global_norm(&mut grad, c);
                }
                let mut next = theta.clone();
                adam.update(&mut next, &grad)?;
                if next.iter().all(|v| v.is_finite()) {
                    theta = next;
                    model.set_flat_params(&theta)?;
                    loss_sum += loss;
                    loss_count += 1;
                    true
                } else {
                    false
                }
            }
            Ok(_) | Err(Error::NumericFault(_)) => false,
            Err(e) => return Err(e),
        };
        if applied {
            faults_in_a_row = 0;
        } else {
            skipped += 1;
            faults_in_a_row += 1;
            if faults_in_a_row >= MAX_CONSECUTIVE_FAULTS {
                stop_reason = StopReason::NumericFaults;
                break;
            }
        }

        if update % cfg.eval_every == 0 || update == cfg.max_updates {
            let val = validation_rmse(&model, val_ds).unwrap_or(f64::NAN);
            let train_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN };
            records.push(EvalRecord {
                update,
                train_loss,
                val_rmse: val,
            });
            loss_sum = 0.0;
            loss_count = 0;
            if val < best.2 || best.2.is_nan() && !val.is_nan() {
                best = (model.clone(), update, val);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stop_reason = StopReason::Patience;
                    break;
                }
            }
        }
    }

    let (best_model, best_update, best_val_rmse) = best;
    let history = TrainHistory {
        records,
        best_checkpoint: best_model.to_json()?,
        best_update,
        best_val_rmse,
        stop_reason,
        skipped_batches: skipped,
        wall_time: started.elapsed(),
    };
    Ok((best_model, history))
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Suggested `1/tau` in 1/seconds.
///
/// With a pilot model: `RMS(ẋ)/RMS(x)` over its free-run states on `ds`,
/// with `ẋ = f(x, u)/tau_pilot`. Without: `RMS(Δy/Δt)/RMS(y)` on z-scored
/// outputs, first differences standing in for the derivative.
pub fn suggest_tau(ds: &Dataset, pilot: Option<&SubnetModel>) -> Result<f64> {
    if ds.len() < 2 {
        return Err(Error::invalid("at least two samples are needed"));
    }
    match pilot {
        Some(m) => {
            if m.mode() != Mode::Ct {
                return Err(Error::invalid("a pilot model must be continuous-time"));
            }
            let tr = m.simulate_free_run(ds)?;
            let dsn = m.norm().normalize(ds)?;
            let field = MlpField::new(m.f_net(), m.dims().n_x);
            let tau = m.solver().tau;
            let states = &tr.states[..tr.states.len() - 1];
            let derivs: Vec<f64> = states
                .iter()
                .enumerate()
                .flat_map(|(k, x)| {
                    field
                        .eval(x, &dsn.u.row(tr.start + k).to_vec())
                        .into_iter()
                        .map(|v| v / tau)
                        .collect::<Vec<_>>()
                })
                .collect();
            let rms_x = rms(states.iter().flatten().copied());
            if !(rms_x > 0.0) {
                return Err(Error::DegenerateData("pilot state trajectory is identically zero".into()));
            }
            Ok(rms(derivs.into_iter()) / rms_x)
        }
        None => {
            let n = ds.len() as f64;
            let mut z = ds.y.clone();
            for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
                let mean = col.sum() / n;
                let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                if !(std > 0.0) {
                    return Err(Error::DegenerateData(format!("output y{j} is constant")));
                }
                col.mapv_inplace(|v| (v - mean) / std);
            }
            let diffs = z.slice(s![1.., ..]).to_owned() - z.slice(s![..-1, ..]);
            Ok(rms(diffs.iter().map(|d| d / ds.dt)) / rms(z.iter().copied()))
        }
    }
}
