//! JSON run configuration: parsing, defaults, path resolution and validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use subnet_core::data::{SyntheticConfig, SyntheticSystem};
use subnet_core::eval::default_tau_grid;
use subnet_core::model::Architecture;
use subnet_core::ode::Method;
use subnet_core::training::TrainConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Generate,
    Train,
    Eval,
    SweepTau,
    ProbeSmoothness,
    Reconstruct,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub command: Command,
    /// Seeds model initialisation, batch sampling, probe directions and, for
    /// `generate`, the input signal. Falls back to `train.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruct: Option<ReconstructSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DataSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv(CsvSource),
    Synthetic(SyntheticConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default = "one")]
    pub n_u: usize,
    #[serde(default = "one")]
    pub n_y: usize,
    pub dt: f64,
}

fn one() -> usize {
    1
}

impl DataSource {
    /// `(n_u, n_y, dt)`.
    pub fn shape(&self) -> Result<(usize, usize, f64)> {
        Ok(match self {
            DataSource::Csv(c) => (c.n_u, c.n_y, c.dt),
            DataSource::Synthetic(s) => {
                let sys = SyntheticSystem::new(s.system, &s.params)?;
                (sys.n_u(), sys.n_y(), s.dt)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_x: usize,
    pub n_a: usize,
    pub n_b: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "yes")]
    pub bypass: bool,
}

fn default_hidden() -> Vec<usize> {
    Architecture::default().hidden
}

fn yes() -> bool {
    true
}

impl ModelSection {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden.clone(),
            bypass: self.bypass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub method: Method,
    pub substeps: usize,
    /// Seconds; estimated from the training outputs when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            substeps: 1,
            tau: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub model: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// `Δt/τ` values.
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            grid: default_tau_grid(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Probe a saved model instead of a freshly initialised one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(rename = "T_values")]
    pub t_values: Vec<usize>,
    pub n_probes: usize,
    pub eps: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            model: None,
            t_values: vec![8, 32, 128],
            n_probes: 32,
            eps: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructSection {
    /// Number of past outputs used per estimate.
    pub z: usize,
    /// Sample indices to reconstruct; every feasible index when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
    /// Also report this model's encoder estimates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        Self {
            z: 3,
            indices: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub seeds: Vec<u64>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Reads, resolves and validates a configuration file. Relative paths are
/// taken relative to the file's directory.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, &base).with_context(|| format!("in {}", path.display()))
}

pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config error at `{path}`: {}", e.into_inner())
    })?;
    cfg.resolve(base_dir)?;
    cfg.validate()?;
    Ok(cfg)
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

impl RunConfig {
    /// Makes paths absolute and fills the sections the command uses with
    /// their defaults.
    fn resolve(&mut self, base: &Path) -> Result<()> {
        self.output_dir = absolute(base, &self.output_dir);
        if let Some(data) = &mut self.data {
            for src in [&mut data.train, &mut data.val, &mut data.test].into_iter().flatten() {
                if let DataSource::Csv(c) = src {
                    c.path = absolute(base, &c.path);
                }
            }
        }
        match self.command {
            Command::Generate => {
                if let Some(g) = &mut self.generate {
                    match self.seed {
                        Some(s) => g.input.seed = s,
                        None => self.seed = Some(g.input.seed),
                    }
                }
                self.train = None;
            }
            Command::Eval | Command::Reconstruct => {
                self.train = None;
                self.seed.get_or_insert(0);
            }
            _ => {
                let train = self.train.get_or_insert_with(TrainConfig::default);
                let seed = *self.seed.get_or_insert(train.seed);
                train.seed = seed;
                self.solver.get_or_insert_with(SolverSection::default);
            }
        }
        match self.command {
            Command::SweepTau => {
                self.sweep.get_or_insert_with(SweepSection::default);
            }
            Command::ProbeSmoothness => {
                self.probe.get_or_insert_with(ProbeSection::default);
            }
            Command::Reconstruct => {
                self.reconstruct.get_or_insert_with(ReconstructSection::default);
            }
            Command::Ensemble => {
                self.ensemble.get_or_insert_with(EnsembleSection::default);
            }
            _ => {}
        }
        if let Some(e) = &mut self.eval {
            e.model = absolute(base, &e.model);
        }
        if let Some(p) = self.probe.as_mut().and_then(|p| p.model.as_mut()) {
            *p = absolute(base, p);
        }
        if let Some(p) = self.reconstruct.as_mut().and_then(|r| r.model.as_mut()) {
            *p = absolute(base, p);
        }
        Ok(())
    }

    /// `--out` / `--seed` command-line overrides.
    pub fn apply_overrides(&mut self, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
        if let Some(out) = out {
            let cwd = std::env::current_dir()?;
            self.output_dir = absolute(&cwd, out);
        }
        if let Some(seed) = seed {
            self.seed = Some(seed);
            if let Some(t) = &mut self.train {
                t.seed = seed;
            }
            if let Some(g) = &mut self.generate {
                g.input.seed = seed;
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn data(&self) -> Result<&DataSection> {
        self.data.as_ref().context("this command needs a `data` section")
    }

    fn require(&self, which: &str) -> Result<&DataSource> {
        let d = self.data()?;
        let src = match which {
            "train" => &d.train,
            "val" => &d.val,
            _ => &d.test,
        };
        src.as_ref().with_context(|| format!("this command needs `data.{which}`"))
    }

    pub fn train_source(&self) -> Result<&DataSource> {
        self.require("train")
    }

    pub fn val_source(&self) -> Result<&DataSource> {
        self.require("val")
    }

    pub fn test_source(&self) -> Result<&DataSource> {
        self.require("test")
    }

    pub fn model_section(&self) -> Result<&ModelSection> {
        self.model.as_ref().context("this command needs a `model` section")
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            bail!(
                "unsupported config format_version {} (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            );
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        let mut shape: Option<(usize, usize, f64)> = None;
        if let Some(d) = &self.data {
            for (name, src) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
                let Some(src) = src else { continue };
                match src {
                    DataSource::Csv(c) => {
                        if !c.path.is_file() {
                            bail!("data.{name}: file {} not found", c.path.display());
                        }
                        if c.n_u == 0 || c.n_y == 0 {
                            bail!("data.{name}: n_u and n_y must be positive");
                        }
                        if !(c.dt > 0.0 && c.dt.is_finite()) {
                            bail!("data.{name}: dt must be positive");
                        }
                    }
                    DataSource::Synthetic(s) => s.validate().with_context(|| format!("data.{name}"))?,
                }
                let sh = src.shape()?;
                match shape {
                    None => shape = Some(sh),
                    Some(first) if first != sh => bail!(
                        "data.{name} has (n_u, n_y, dt) = {sh:?}, other splits have {first:?}"
                    ),
                    Some(_) => {}
                }
            }
        }
        if let Some(m) = &self.model {
            if m.n_x == 0 {
                bail!("model.n_x must be positive");
            }
            if let Some((_, n_y, _)) = shape {
                if m.n_a * n_y < m.n_x {
                    bail!(
                        "model: encoder sees n_a*n_y = {} past outputs, fewer than n_x = {}",
                        m.n_a * n_y,
                        m.n_x
                    );
                }
            }
        }
        if let Some(s) = &self.solver {
            if s.substeps == 0 {
                bail!("solver.substeps must be at least 1");
            }
            if let Some(tau) = s.tau {
                if !(tau > 0.0 && tau.is_finite()) {
                    bail!("solver.tau must be positive");
                }
            }
        }
        if let Some(e) = &self.eval {
            if !e.model.is_file() {
                bail!("eval.model: file {} not found", e.model.display());
            }
        }
        for p in [
            self.probe.as_ref().and_then(|p| p.model.as_ref()),
            self.reconstruct.as_ref().and_then(|r| r.model.as_ref()),
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                bail!("model file {} not found", p.display());
            }
        }

        match self.command {
            Command::Generate => {
                self.generate.as_ref().context("`generate` needs a `generate` section")?.validate()?;
            }
            Command::Train => {
                self.train_source()?;
                self.val_source()?;
                self.model_section()?;
            }
            Command::Eval => {
                self.test_source()?;
                self.eval.as_ref().context("`eval` needs an `eval` section with the model path")?;
            }
            Command::SweepTau => {
                self.train_source()?;
                self.val_source()?;
                self.test_source()?;
                self.model_section()?;
                let s = self.sweep.as_ref().expect("filled during resolve");
                if s.grid.is_empty() || s.seeds.is_empty() {
                    bail!("sweep.grid and sweep.seeds must be nonempty");
                }
                if s.grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
                    bail!("sweep.grid values must be positive");
                }
            }
            Command::ProbeSmoothness => {
                self.train_source()?;
                let p = self.probe.as_ref().expect("filled during resolve");
                if p.model.is_none() {
                    self.model_section()?;
                }
                if p.t_values.is_empty() || p.t_values.contains(&0) {
                    bail!("probe.T_values must be nonempty and positive");
                }
                if p.n_probes == 0 || !(p.eps > 0.0 && p.eps.is_finite()) {
                    bail!("probe.n_probes and probe.eps must be positive");
                }
            }
            Command::Reconstruct => {
                if !matches!(self.test_source()?, DataSource::Synthetic(_)) {
                    bail!("`reconstruct` needs synthetic `data.test` so the true dynamics are known");
                }
                if self.reconstruct.as_ref().expect("filled during resolve").z == 0 {
                    bail!("reconstruct.z must be at least 1");
                }
            }
            Command::Ensemble => {
                self.train_source()?;
                self.val_source()?;
                self.test_source()?;
                self.model_section()?;
                if self.ensemble.as_ref().expect("filled during resolve").seeds.is_empty() {
                    bail!("ensemble.seeds must be nonempty");
                }
            }
        }
        Ok(())
    }
}
