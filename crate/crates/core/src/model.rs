//! The encoder / state-derivative / output model and its simulations.
//!
//! All model-internal quantities live in normalised units: inputs and outputs
//! are z-scored with the model's [`NormStats`] before they reach a network, and
//! predicted outputs are mapped back to physical units only when they leave
//! [`SubnetModel::simulate_subsection`] or [`SubnetModel::simulate_free_run`].
//!
//! Encoder windows are ordered most recent sample first, inputs before
//! outputs, channels contiguous within a sample:
//!
//! ```text
//! [u_{n-1}[0..n_u], .., u_{n-n_b}[0..n_u], y_{n-1}[0..n_y], .., y_{n-n_a}[0..n_y]]
//! ```

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats};
use crate::nnmath::{FlatParams, Mlp, MlpShape, ParamLayout};
use crate::ode::{ode_step, MlpField, SolverConfig, VectorField};
use crate::{Error, FaultLocation, Result};

/// Current model file version.
pub const FORMAT_VERSION: u32 = 1;

/// Continuous-time (ODE between samples) or discrete-time (`x⁺ = f(x, u)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Ct,
    Dt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_a: usize,
    pub n_b: usize,
}

impl ModelDims {
    pub fn window_len(&self) -> usize {
        self.n_a * self.n_y + self.n_b * self.n_u
    }

    /// First start index with a complete encoder window.
    pub fn lag(&self) -> usize {
        self.n_a.max(self.n_b)
    }

    fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_u == 0 || self.n_y == 0 {
            return Err(Error::invalid(format!(
                "n_x, n_u and n_y must be positive, got {}, {}, {}",
                self.n_x, self.n_u, self.n_y
            )));
        }
        Ok(())
    }
}

/// Hidden layer widths shared by the three networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub bypass: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            bypass: true,
        }
    }
}

/// One simulated subsection. `states` are normalised model states,
/// `outputs` are in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsectionResult {
    pub start: usize,
    /// `T + 1` states, the first being the encoder output.
    pub states: Vec<Vec<f64>>,
    /// `T × n_y` predicted outputs.
    pub outputs: Array2<f64>,
}

/// Free-run simulation over a whole dataset, with the measured outputs it
/// should be compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrace {
    pub start: usize,
    pub states: Vec<Vec<f64>>,
    /// Predicted outputs for samples `start..N`, physical units.
    pub predicted: Array2<f64>,
    /// Measured outputs for the same samples.
    pub measured: Array2<f64>,
}

impl EvalTrace {
    pub fn len(&self) -> usize {
        self.predicted.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder input for a subsection starting at `n`.
pub fn encoder_window(ds: &Dataset, n: usize, n_a: usize, n_b: usize) -> Result<Vec<f64>> {
    if n < n_a.max(n_b) || n > ds.len() {
        return Err(Error::invalid(format!(
            "encoder window at n={n} needs {} past samples within N={}",
            n_a.max(n_b),
            ds.len()
        )));
    }
    let mut w = Vec::with_capacity(n_b * ds.n_u() + n_a * ds.n_y());
    for j in 1..=n_b {
        w.extend(ds.u.row(n - j).iter());
    }
    for j in 1..=n_a {
        w.extend(ds.y.row(n - j).iter());
    }
    Ok(w)
}

/// State-derivative network, output network and encoder network together
/// with the solver and normalisation they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetModel {
    dims: ModelDims,
    mode: Mode,
    solver: SolverConfig,
    norm: NormStats,
    f_net: Mlp,
    h_net: Mlp,
    psi_net: Mlp,
}

impl SubnetModel {
    /// Randomly initialised model; the three networks are drawn in the order
    /// `f`, `h`, `psi` from one generator seeded with `seed`.
    pub fn new(
        dims: ModelDims,
        arch: &Architecture,
        solver: SolverConfig,
        norm: NormStats,
        mode: Mode,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Mlp::init_with_rng(
            &MlpShape::with_hidden(dims.n_x + dims.n_u, &arch.hidden, dims.n_x, arch.bypass),
            &mut rng,
        )?;
        let h = Mlp::init_with_rng(
            &MlpShape::with_hidden(dims.n_x, &arch.hidden, dims.n_y, arch.bypass),
            &mut rng,
        )?;
        let psi = if dims.window_len() == 0 {
            Mlp::zeros(&MlpShape::new(vec![0, dims.n_x], false))?
        } else {
            Mlp::init_with_rng(
                &MlpShape::with_hidden(dims.window_len(), &arch.hidden, dims.n_x, arch.bypass),
                &mut rng,
            )?
        };
        Self::from_nets(dims, f, h, psi, solver, norm, mode)
    }

    /// Assembles a model from existing networks, checking every dimension.
    ///
    /// An encoder whose window is non-empty must see at least `n_x` output
    /// values (`n_a·n_y ≥ n_x`); otherwise the state cannot be recovered from
    /// the window. An empty window (`n_a = n_b = 0`) is allowed and makes the
    /// encoder a fixed initial state, its output bias.
    pub fn from_nets(
        dims: ModelDims,
        f_net: Mlp,
        h_net: Mlp,
        psi_net: Mlp,
        solver: SolverConfig,
        norm: NormStats,
        mode: Mode,
    ) -> Result<Self> {
        dims.validate()?;
        solver.validate()?;
        norm.validate()?;
        if dims.window_len() > 0 && dims.n_a * dims.n_y < dims.n_x {
            return Err(Error::invalid(format!(
                "encoder sees n_a*n_y = {} past outputs, fewer than n_x = {}",
                dims.n_a * dims.n_y,
                dims.n_x
            )));
        }
        let check = |name: &str, net: &Mlp, input: usize, output: usize| {
            if net.input_dim() != input || net.output_dim() != output {
                return Err(Error::invalid(format!(
                    "{name} network maps {} -> {}, expected {input} -> {output}",
                    net.input_dim(),
                    net.output_dim()
                )));
            }
            Ok(())
        };
        check("f", &f_net, dims.n_x + dims.n_u, dims.n_x)?;
        check("h", &h_net, dims.n_x, dims.n_y)?;
        check("psi", &psi_net, dims.window_len(), dims.n_x)?;
        if norm.n_u() != dims.n_u || norm.n_y() != dims.n_y {
            return Err(Error::invalid("normalisation channel counts do not match n_u/n_y"));
        }
        Ok(Self {
            dims,
            mode,
            solver,
            norm,
            f_net,
            h_net,
            psi_net,
        })
    }

    /// Model without an encoder window that always starts from `x0`
    /// (normalised state units). `dims.n_a` and `dims.n_b` are forced to 0.
    pub fn with_fixed_initial_state(
        dims: ModelDims,
        f_net: Mlp,
        h_net: Mlp,
        x0: &[f64],
        solver: SolverConfig,
        norm: NormStats,
        mode: Mode,
    ) -> Result<Self> {
        if x0.len() != dims.n_x {
            return Err(Error::invalid(format!("x0 has {} entries, n_x is {}", x0.len(), dims.n_x)));
        }
        let dims = ModelDims { n_a: 0, n_b: 0, ..dims };
        let mut psi = Mlp::zeros(&MlpShape::new(vec![0, dims.n_x], false))?;
        psi.layers_mut()[0].bias.iter_mut().zip(x0).for_each(|(b, v)| *b = *v);
        Self::from_nets(dims, f_net, h_net, psi, solver, norm, mode)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn f_net(&self) -> &Mlp {
        &self.f_net
    }

    pub fn h_net(&self) -> &Mlp {
        &self.h_net
    }

    pub fn psi_net(&self) -> &Mlp {
        &self.psi_net
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Same `f` and `h`, encoder replaced by the fixed initial state `x0`.
    pub fn into_fixed_initial_state(self, x0: &[f64]) -> Result<Self> {
        Self::with_fixed_initial_state(self.dims, self.f_net, self.h_net, x0, self.solver, self.norm, self.mode)
    }

    /// The constant initial state of an encoder without inputs.
    pub fn fixed_initial_state(&self) -> Option<Vec<f64>> {
        (self.dims.window_len() == 0).then(|| self.psi_net.layers()[0].bias.to_vec())
    }

    /// Changes `tau` (and nothing else) of the continuous-time solver.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        let solver = SolverConfig { tau, ..self.solver };
        solver.validate()?;
        self.solver = solver;
        Ok(())
    }

    /// Layout of [`SubnetModel::flat_params`]: `f.*`, then `h.*`, then `psi.*`.
    pub fn param_layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::new(Vec::new());
        layout.extend_prefixed("f.", &self.f_net.shape().layout());
        layout.extend_prefixed("h.", &self.h_net.shape().layout());
        layout.extend_prefixed("psi.", &self.psi_net.shape().layout());
        layout
    }

    pub fn param_count(&self) -> usize {
        self.f_net.param_count() + self.h_net.param_count() + self.psi_net.param_count()
    }

    pub fn flat_params(&self) -> FlatParams {
        let mut values = Vec::with_capacity(self.param_count());
        self.f_net.write_flat(&mut values);
        self.h_net.write_flat(&mut values);
        self.psi_net.write_flat(&mut values);
        FlatParams {
            values,
            layout: self.param_layout(),
        }
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        let mut pos = self.f_net.read_flat(values);
        pos += self.h_net.read_flat(&values[pos..]);
        self.psi_net.read_flat(&values[pos..]);
        Ok(())
    }

    /// Flat vector laid out like [`SubnetModel::flat_params`] from three
    /// per-network gradients.
    pub fn concat_grads(f: &Mlp, h: &Mlp, psi: &Mlp) -> Vec<f64> {
        let mut out = Vec::with_capacity(f.param_count() + h.param_count() + psi.param_count());
        f.write_flat(&mut out);
        h.write_flat(&mut out);
        psi.write_flat(&mut out);
        out
    }

    /// Applies the encoder to a window of normalised samples.
    pub fn encode(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.dims.window_len() {
            return Err(Error::invalid(format!(
                "window has {} values, encoder expects {}",
                window.len(),
                self.dims.window_len()
            )));
        }
        self.psi_net.forward(window)
    }

    /// Encoder estimate of the (normalised) state at sample `n` of a
    /// physical-unit dataset.
    pub fn estimate_state(&self, ds: &Dataset, n: usize) -> Result<Vec<f64>> {
        let dsn = self.norm.normalize(ds)?;
        self.encode(&encoder_window(&dsn, n, self.dims.n_a, self.dims.n_b)?)
    }

    /// Discrete-time update `x⁺ = f([x; u])`.
    pub fn dt_step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.n_x || u.len() != self.dims.n_u {
            return Err(Error::invalid(format!(
                "dt_step expects x of {} and u of {}, got {} and {}",
                self.dims.n_x,
                self.dims.n_u,
                x.len(),
                u.len()
            )));
        }
        let mut xu = x.to_vec();
        xu.extend_from_slice(u);
        self.f_net.forward(&xu)
    }

    /// One sample interval in the model's mode; `x` and `u` normalised.
    pub fn advance(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let next = match self.mode {
            Mode::Ct => {
                let field = MlpField::new(&self.f_net, self.dims.n_x);
                ode_step(|x, u| field.eval(x, u), x, u, &self.solver)?
            }
            Mode::Dt => self.dt_step(x, u)?,
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault(FaultLocation::default()));
        }
        Ok(next)
    }

    /// Normalised output for a normalised state.
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.h_net.forward(x)
    }

    /// Simulates `T` samples from `n` on a dataset that is already normalised.
    /// Outputs are returned normalised.
    pub fn simulate_normalized(&self, dsn: &Dataset, n: usize, t: usize) -> Result<(Vec<Vec<f64>>, Array2<f64>)> {
        self.check_dataset(dsn)?;
        if n < self.dims.lag() || n + t > dsn.len() {
            return Err(Error::invalid(format!(
                "subsection n={n}, T={t} outside [{}, {}]",
                self.dims.lag(),
                dsn.len() as i64 - t as i64
            )));
        }
        let x0 = self.encode(&encoder_window(dsn, n, self.dims.n_a, self.dims.n_b)?)?;
        let mut states = Vec::with_capacity(t + 1);
        let mut outputs = Array2::zeros((t, self.dims.n_y));
        states.push(x0);
        for k in 0..t {
            let x = states.last().unwrap();
            let y = self.output(x)?;
            outputs.row_mut(k).iter_mut().zip(&y).for_each(|(o, v)| *o = *v);
            let u = dsn.u.row(n + k).to_vec();
            let next = self.advance(x, &u).map_err(|e| e.at_subsection(n, k))?;
            states.push(next);
        }
        Ok((states, outputs))
    }

    /// Simulates `T` samples starting at `n` from the encoder's estimate.
    pub fn simulate_subsection(&self, ds: &Dataset, n: usize, t: usize) -> Result<SubsectionResult> {
        let dsn = self.norm.normalize(ds)?;
        let (states, mut outputs) = self.simulate_normalized(&dsn, n, t)?;
        self.norm.denormalize_outputs(&mut outputs);
        Ok(SubsectionResult { start: n, states, outputs })
    }

    /// One simulation from the first complete window to the end of `ds`.
    pub fn simulate_free_run(&self, ds: &Dataset) -> Result<EvalTrace> {
        let n = self.dims.lag();
        if ds.len() <= n {
            return Err(Error::invalid(format!(
                "free run needs more than {n} samples, dataset has {}",
                ds.len()
            )));
        }
        let sub = self.simulate_subsection(ds, n, ds.len() - n)?;
        Ok(EvalTrace {
            start: n,
            states: sub.states,
            predicted: sub.outputs,
            measured: ds.y.slice(s![n.., ..]).to_owned(),
        })
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.n_u() != self.dims.n_u || ds.n_y() != self.dims.n_y {
            return Err(Error::invalid(format!(
                "dataset has {}/{} channels, model expects {}/{}",
                ds.n_u(),
                ds.n_y(),
                self.dims.n_u,
                self.dims.n_y
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk form of one network: widths, bypass flag and the flat parameter
/// vector in layout order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    layer_sizes: Vec<usize>,
    bypass: bool,
    params: Vec<f64>,
}

impl NetworkFile {
    fn from_net(net: &Mlp) -> Self {
        let shape = net.shape();
        Self {
            layer_sizes: shape.layer_sizes,
            bypass: shape.bypass,
            params: net.flatten().values,
        }
    }

    fn into_net(self) -> Result<Mlp> {
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("network parameters must be finite".into()));
        }
        Mlp::unflatten(&MlpShape::new(self.layer_sizes, self.bypass), &self.params)
    }
}

/// Model JSON document. Floats are written in the shortest decimal form that
/// parses back to the identical `f64`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    n_a: usize,
    n_b: usize,
    mode: Mode,
    solver: SolverConfig,
    norm: NormStats,
    f_net: NetworkFile,
    h_net: NetworkFile,
    psi_net: NetworkFile,
}

impl From<&SubnetModel> for ModelFile {
    fn from(m: &SubnetModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n_x: m.dims.n_x,
            n_u: m.dims.n_u,
            n_y: m.dims.n_y,
            n_a: m.dims.n_a,
            n_b: m.dims.n_b,
            mode: m.mode,
            solver: m.solver,
            norm: m.norm.clone(),
            f_net: NetworkFile::from_net(&m.f_net),
            h_net: NetworkFile::from_net(&m.h_net),
            psi_net: NetworkFile::from_net(&m.psi_net),
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<SubnetModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let dims = ModelDims {
            n_x: self.n_x,
            n_u: self.n_u,
            n_y: self.n_y,
            n_a: self.n_a,
            n_b: self.n_b,
        };
        SubnetModel::from_nets(
            dims,
            self.f_net.into_net()?,
            self.h_net.into_net()?,
            self.psi_net.into_net()?,
            self.solver,
            self.norm,
            self.mode,
        )
    }
}
