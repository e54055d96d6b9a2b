//! Data-generating systems with known state trajectories.
//!
//! `cascaded_tanks`: two gravity-drained tanks in series fed by a pump,
//!
//! ```text
//! dx1/dt = -k1 sqrt(max(x1, 0)) + k4 u
//! dx2/dt =  k1 sqrt(max(x1, 0)) - k2 sqrt(max(x2, 0))
//! y      =  x2 + w
//! ```
//!
//! with both levels clamped to `[0, x_max]` after every integration sub-step
//! (overflow). Inflow into the lower tank from an overflowing upper tank is
//! not modelled.
//!
//! `linear2`: `dx/dt = A x + B u`, `y = C x + w` with a 2-state `A`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::ode::{ode_step, SolverConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    CascadedTanks,
    Linear2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Multisine,
    RandomSteps,
}

/// Excitation signal. `offset`/`amplitude` default per system; the signal
/// spans `offset ± amplitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub kind: InputKind,
    pub seed: u64,
    pub offset: Option<f64>,
    pub amplitude: Option<f64>,
    /// Upper band edge of the multisine in Hz; defaults to `0.3 / dt`.
    pub f_max: Option<f64>,
    /// Samples per level for `random_steps`.
    pub hold: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            kind: InputKind::Multisine,
            seed: 0,
            offset: None,
            amplitude: None,
            f_max: None,
            hold: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub system: SystemKind,
    /// Overrides of the system's named coefficients.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub n: usize,
    pub dt: f64,
    #[serde(default)]
    pub input: InputConfig,
    /// Standard deviation of the additive white output noise.
    #[serde(default)]
    pub noise_std: f64,
    /// Noise stream seed; defaults to the input seed.
    #[serde(default)]
    pub noise_seed: Option<u64>,
    #[serde(default = "default_truth_substeps")]
    pub truth_substeps: usize,
}

fn default_truth_substeps() -> usize {
    20
}

impl SyntheticConfig {
    pub fn new(system: SystemKind, n: usize, dt: f64) -> Self {
        Self {
            system,
            params: BTreeMap::new(),
            n,
            dt,
            input: InputConfig::default(),
            noise_std: 0.0,
            noise_seed: None,
            truth_substeps: default_truth_substeps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("synthetic datasets need N >= 2"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("synthetic dt must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be nonnegative"));
        }
        if self.truth_substeps < 10 {
            return Err(Error::invalid("truth_substeps must be at least 10"));
        }
        if self.input.kind == InputKind::RandomSteps && self.input.hold == 0 {
            return Err(Error::invalid("random_steps hold must be positive"));
        }
        SyntheticSystem::new(self.system, &self.params).map(|_| ())
    }
}

/// A data-generating system with its coefficients resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSystem {
    kind: SystemKind,
    params: BTreeMap<String, f64>,
}

const TANK_DEFAULTS: &[(&str, f64)] = &[
    ("k1", 0.5),
    ("k2", 0.4),
    ("k4", 1.0),
    ("x_max", 10.0),
    ("x1_0", 0.0),
    ("x2_0", 0.0),
];

const LINEAR2_DEFAULTS: &[(&str, f64)] = &[
    ("a11", -0.05),
    ("a12", 0.25),
    ("a21", -0.25),
    ("a22", -0.05),
    ("b1", 0.0),
    ("b2", 0.25),
    ("c1", 1.0),
    ("c2", 0.0),
    ("x1_0", 0.0),
    ("x2_0", 0.0),
];

impl SyntheticSystem {
    pub fn new(kind: SystemKind, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let defaults = match kind {
            SystemKind::CascadedTanks => TANK_DEFAULTS,
            SystemKind::Linear2 => LINEAR2_DEFAULTS,
        };
        let mut params: BTreeMap<String, f64> = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (k, v) in overrides {
            if !params.contains_key(k) {
                return Err(Error::invalid(format!("unknown parameter `{k}` for {kind:?}")));
            }
            if !v.is_finite() {
                return Err(Error::invalid(format!("parameter `{k}` must be finite")));
            }
            params.insert(k.clone(), *v);
        }
        if kind == SystemKind::CascadedTanks && !(params["x_max"] > 0.0) {
            return Err(Error::invalid("x_max must be positive"));
        }
        Ok(Self { kind, params })
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn param(&self, name: &str) -> f64 {
        self.params[name]
    }

    pub fn n_x(&self) -> usize {
        2
    }

    pub fn n_u(&self) -> usize {
        1
    }

    pub fn n_y(&self) -> usize {
        1
    }

    pub fn initial_state(&self) -> Vec<f64> {
        vec![self.param("x1_0"), self.param("x2_0")]
    }

    pub fn derivative(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let p = |k: &str| self.params[k];
        match self.kind {
            SystemKind::CascadedTanks => {
                let q1 = p("k1") * x[0].max(0.0).sqrt();
                let q2 = p("k2") * x[1].max(0.0).sqrt();
                vec![-q1 + p("k4") * u[0], q1 - q2]
            }
            SystemKind::Linear2 => vec![
                p("a11") * x[0] + p("a12") * x[1] + p("b1") * u[0],
                p("a21") * x[0] + p("a22") * x[1] + p("b2") * u[0],
            ],
        }
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            SystemKind::CascadedTanks => vec![x[1]],
            SystemKind::Linear2 => vec![self.param("c1") * x[0] + self.param("c2") * x[1]],
        }
    }

    /// Enforces state constraints (tank overflow); a no-op for `linear2`.
    pub fn project(&self, x: &mut [f64]) {
        if self.kind == SystemKind::CascadedTanks {
            let hi = self.param("x_max");
            x.iter_mut().for_each(|v| *v = v.clamp(0.0, hi));
        }
    }

    /// One sample interval of RK4 with `substeps` sub-steps, projecting after
    /// each. A negative `dt` integrates backwards; no projection is applied then.
    pub fn advance(&self, x: &[f64], u: &[f64], dt: f64, substeps: usize) -> Result<Vec<f64>> {
        let h = dt.abs() / substeps as f64;
        let cfg = SolverConfig::rk4(1.0, h)?;
        let backwards = dt < 0.0;
        let mut x = x.to_vec();
        for _ in 0..substeps {
            x = if backwards {
                ode_step(|x, u| self.derivative(x, u).iter().map(|v| -v).collect(), &x, u, &cfg)?
            } else {
                let mut next = ode_step(|x, u| self.derivative(x, u), &x, u, &cfg)?;
                self.project(&mut next);
                next
            };
        }
        Ok(x)
    }

    fn default_offset_amplitude(&self) -> (f64, f64) {
        match self.kind {
            SystemKind::CascadedTanks => (1.0, 0.8),
            SystemKind::Linear2 => (0.0, 1.0),
        }
    }
}

/// Noise-free states and outputs recorded alongside a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrace {
    /// `N × n_x` true states at the sample instants.
    pub states: Array2<f64>,
    /// `N × n_y` outputs before noise.
    pub y_clean: Array2<f64>,
}

impl TruthTrace {
    /// Writes the dataset columns plus `x0..` and `y_clean` truth columns.
    pub fn write_csv<W: std::io::Write>(&self, ds: &Dataset, writer: W) -> Result<()> {
        let mut extra: Vec<(String, Vec<f64>)> = (0..self.states.ncols())
            .map(|j| (format!("x{j}"), self.states.column(j).to_vec()))
            .collect();
        let n_y = self.y_clean.ncols();
        for j in 0..n_y {
            let name = if n_y == 1 { "y_clean".to_string() } else { format!("y_clean{j}") };
            extra.push((name, self.y_clean.column(j).to_vec()));
        }
        ds.write_csv(writer, &extra)
    }

    pub fn save_csv(&self, ds: &Dataset, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.write_csv(ds, std::fs::File::create(path)?)
    }
}

fn build_input(cfg: &SyntheticConfig, sys: &SyntheticSystem) -> Vec<f64> {
    let (def_off, def_amp) = sys.default_offset_amplitude();
    let offset = cfg.input.offset.unwrap_or(def_off);
    let amplitude = cfg.input.amplitude.unwrap_or(def_amp);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.input.seed);
    let n = cfg.n;
    match cfg.input.kind {
        InputKind::Multisine => {
            let f_max = cfg.input.f_max.unwrap_or(0.3 / cfg.dt);
            let period = n as f64 * cfg.dt;
            let n_freq = (f_max * period).floor() as usize;
            let phases: Vec<f64> = (0..n_freq).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let raw: Vec<f64> = (0..n)
                .map(|k| {
                    let t = k as f64 * cfg.dt;
                    phases
                        .iter()
                        .enumerate()
                        .map(|(j, ph)| (2.0 * PI * (j + 1) as f64 / period * t + ph).cos())
                        .sum()
                })
                .collect();
            let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
            raw.iter().map(|v| offset + scale * v).collect()
        }
        InputKind::RandomSteps => {
            let mut level = 0.0;
            (0..n)
                .map(|k| {
                    if k % cfg.input.hold == 0 {
                        level = offset + amplitude * rng.random_range(-1.0..=1.0);
                    }
                    level
                })
                .collect()
        }
    }
}

/// Simulates the configured system; returns the noisy dataset and the truth.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, TruthTrace)> {
    cfg.validate()?;
    let sys = SyntheticSystem::new(cfg.system, &cfg.params)?;
    let u = build_input(cfg, &sys);
    let n = cfg.n;
    let mut states = Array2::zeros((n, sys.n_x()));
    let mut y_clean = Array2::zeros((n, sys.n_y()));
    let mut x = sys.initial_state();
    sys.project(&mut x);
    for k in 0..n {
        if x.iter().any(|v| !v.is_finite() || v.abs() > 1e8) {
            return Err(Error::Generation(format!("state diverged at sample {k}: {x:?}")));
        }
        states.row_mut(k).assign(&ndarray::aview1(&x));
        y_clean.row_mut(k).assign(&ndarray::aview1(&sys.output(&x)));
        if k + 1 < n {
            x = sys
                .advance(&x, &[u[k]], cfg.dt, cfg.truth_substeps)
                .map_err(|e| Error::Generation(format!("integration failed at sample {k}: {e}")))?;
        }
    }

    let mut y = y_clean.clone();
    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed.unwrap_or(cfg.input.seed));
        rng.set_stream(1);
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        y.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let u = Array2::from_shape_vec((n, 1), u).expect("single input channel");
    let name = format!("{:?}", cfg.system).to_lowercase();
    let ds = Dataset::new(u, y, cfg.dt, name)?;
    Ok((ds, TruthTrace { states, y_clean }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn silent_input() -> InputConfig {
        InputConfig {
            offset: Some(0.0),
            amplitude: Some(0.0),
            ..InputConfig::default()
        }
    }

    #[test]
    fn empty_tanks_stay_empty() {
        let mut cfg = SyntheticConfig::new(SystemKind::CascadedTanks, 200, 4.0);
        cfg.input = silent_input();
        cfg.noise_std = 0.05;
        let (ds, truth) = generate_synthetic(&cfg).unwrap();
        assert!(truth.states.iter().all(|&v| v == 0.0));
        // y is pure noise
        for (y, yc) in ds.y.iter().zip(truth.y_clean.iter()) {
            assert_eq!(*yc, 0.0);
            assert!(y.abs() < 0.05 * 6.0);
        }
    }

    #[test]
    fn linear2_exponential_decay() {
        let mut cfg = SyntheticConfig::new(SystemKind::Linear2, 50, 0.1);
        cfg.params = params(&[
            ("a11", -1.0),
            ("a12", 0.0),
            ("a21", 0.0),
            ("a22", -1.0),
            ("b2", 0.0),
            ("x1_0", 1.0),
        ]);
        cfg.input = silent_input();
        let (ds, _) = generate_synthetic(&cfg).unwrap();
        for k in 0..50 {
            let exact = (-(k as f64) * 0.1).exp();
            assert!((ds.y[[k, 0]] - exact).abs() < 1e-7, "k={k}");
        }
    }

    #[test]
    fn injected_noise_statistics() {
        let mut cfg = SyntheticConfig::new(SystemKind::Linear2, 10_000, 0.5);
        cfg.noise_std = 0.1;
        cfg.input.seed = 3;
        let (ds, truth) = generate_synthetic(&cfg).unwrap();
        let w: Vec<f64> = ds.y.iter().zip(truth.y_clean.iter()).map(|(a, b)| a - b).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
        assert!((0.097..=0.103).contains(&sd), "sample std {sd}");
    }

    #[test]
    fn tanks_states_stay_in_bounds() {
        for (seed, kind) in [(1, InputKind::Multisine), (2, InputKind::RandomSteps)] {
            let mut cfg = SyntheticConfig::new(SystemKind::CascadedTanks, 600, 4.0);
            cfg.input = InputConfig {
                kind,
                seed,
                offset: Some(1.5),
                amplitude: Some(1.5),
                ..InputConfig::default()
            };
            let (_, truth) = generate_synthetic(&cfg).unwrap();
            assert!(truth.states.iter().all(|&v| (0.0..=10.0).contains(&v)));
            // the strong input should overflow the tanks at some point
            assert!(truth.states.iter().any(|&v| v == 10.0));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let mut cfg = SyntheticConfig::new(SystemKind::CascadedTanks, 300, 4.0);
        cfg.noise_std = 0.1;
        cfg.input.seed = 11;
        let (a, _) = generate_synthetic(&cfg).unwrap();
        let (b, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.noise_std = 0.0;
        let (c, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.u, c.u);
    }

    #[test]
    fn diverging_system_is_reported() {
        let mut cfg = SyntheticConfig::new(SystemKind::Linear2, 2000, 1.0);
        cfg.params = params(&[("a11", 2.0), ("a12", 0.0), ("a21", 0.0), ("a22", 2.0), ("x1_0", 1.0)]);
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn unknown_parameter_rejected() {
        assert!(SyntheticSystem::new(SystemKind::CascadedTanks, &params(&[("k3", 1.0)])).is_err());
    }

    #[test]
    fn backward_integration_inverts_forward() {
        let sys = SyntheticSystem::new(SystemKind::CascadedTanks, &BTreeMap::new()).unwrap();
        let x = vec![3.0, 5.0];
        let fwd = sys.advance(&x, &[0.8], 4.0, 20).unwrap();
        let back = sys.advance(&fwd, &[0.8], -4.0, 20).unwrap();
        assert!((back[0] - 3.0).abs() < 1e-6 && (back[1] - 5.0).abs() < 1e-6, "{back:?}");
    }
}
