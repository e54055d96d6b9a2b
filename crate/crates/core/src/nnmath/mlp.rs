use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flat::{FlatParams, ParamLayout, Segment};
use crate::{Error, Result};

/// Affine layer `W x + b` with `W` of shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Layer widths (input first, output last) and whether a linear bypass is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub layer_sizes: Vec<usize>,
    pub bypass: bool,
}

impl MlpShape {
    pub fn new(layer_sizes: Vec<usize>, bypass: bool) -> Self {
        Self { layer_sizes, bypass }
    }

    /// `[input, hidden.., output]` with a bypass.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize, bypass: bool) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, bypass)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    /// Flat layout: per layer the weight matrix (row-major, `(out, in)`) then
    /// the bias; the bypass `(in, out)` row-major comes last.
    pub fn layout(&self) -> ParamLayout {
        let mut segs = Vec::new();
        for (i, w) in self.layer_sizes.windows(2).enumerate() {
            segs.push(Segment {
                name: format!("layer{i}.weight"),
                rows: w[1],
                cols: w[0],
            });
            segs.push(Segment {
                name: format!("layer{i}.bias"),
                rows: w[1],
                cols: 1,
            });
        }
        if self.bypass {
            segs.push(Segment {
                name: "bypass".into(),
                rows: self.input_dim(),
                cols: self.output_dim(),
            });
        }
        ParamLayout::new(segs)
    }

    /// Checks structural validity. Zero-width inputs are allowed here (they
    /// encode constant networks); [`Mlp::init`] is stricter.
    fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least an input and an output size"));
        }
        if self.layer_sizes[1..].iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!(
                "layer sizes after the input must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }
}

/// Feedforward network: tanh on every hidden layer, linear output layer,
/// optional linear bypass from input to output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    bypass: Option<Array2<f64>>,
}

/// Activations recorded by [`Mlp::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchTape {
    input: Array2<f64>,
    hidden: Vec<Array2<f64>>,
}

impl BatchTape {
    pub fn input(&self) -> &Array2<f64> {
        &self.input
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(layer_sizes: &[usize], with_bypass: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(&MlpShape::new(layer_sizes.to_vec(), with_bypass), &mut rng)
    }

    pub fn init_with_rng<R: Rng + ?Sized>(shape: &MlpShape, rng: &mut R) -> Result<Self> {
        if shape.layer_sizes.len() < 2 || shape.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!(
                "layer sizes must have length >= 2 and positive entries, got {:?}",
                shape.layer_sizes
            )));
        }
        let mut net = Self::zeros(shape)?;
        for layer in &mut net.layers {
            let (fan_out, fan_in) = layer.weight.dim();
            xavier_fill(&mut layer.weight, fan_in, fan_out, rng);
        }
        if let Some(bp) = net.bypass.as_mut() {
            let (fan_in, fan_out) = bp.dim();
            xavier_fill(bp, fan_in, fan_out, rng);
        }
        Ok(net)
    }

    pub fn zeros(shape: &MlpShape) -> Result<Self> {
        shape.validate()?;
        let layers = shape
            .layer_sizes
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        let bypass = shape
            .bypass
            .then(|| Array2::zeros((shape.input_dim(), shape.output_dim())));
        Ok(Self { layers, bypass })
    }

    pub fn from_parts(layers: Vec<Dense>, bypass: Option<Array2<f64>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::invalid(format!("layer {i}: bias length does not match weight rows")));
            }
            if i > 0 && l.in_dim() != layers[i - 1].out_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        if let Some(bp) = &bypass {
            let want = (layers[0].in_dim(), layers.last().unwrap().out_dim());
            if bp.dim() != want {
                return Err(Error::invalid(format!("bypass shape {:?}, expected {want:?}", bp.dim())));
            }
        }
        let net = Self { layers, bypass };
        if !net.flatten().is_finite() {
            return Err(Error::NonFinite("MLP parameters".into()));
        }
        Ok(net)
    }

    pub fn shape(&self) -> MlpShape {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::out_dim));
        MlpShape::new(sizes, self.bypass.is_some())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
            + self.bypass.as_ref().map_or(0, |b| b.len())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn bypass(&self) -> Option<&Array2<f64>> {
        self.bypass.as_ref()
    }

    pub fn bypass_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.bypass.as_mut()
    }

    /// Same shape, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape()).expect("shape of an existing network is valid")
    }

    pub fn flatten(&self) -> FlatParams {
        let mut values = Vec::with_capacity(self.param_count());
        self.write_flat(&mut values);
        FlatParams {
            values,
            layout: self.shape().layout(),
        }
    }

    pub(crate) fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        if let Some(bp) = &self.bypass {
            out.extend(bp.iter());
        }
    }

    pub fn unflatten(shape: &MlpShape, values: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(shape)?;
        if values.len() != net.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters for shape {:?}, got {}",
                net.param_count(),
                shape.layer_sizes,
                values.len()
            )));
        }
        net.read_flat(values);
        Ok(net)
    }

    /// Overwrite all parameters from `values` (layout order); returns the count consumed.
    pub(crate) fn read_flat(&mut self, values: &[f64]) -> usize {
        let mut pos = 0;
        let mut take = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for d in dst {
                *d = values[pos];
                pos += 1;
            }
        };
        for l in &mut self.layers {
            take(&mut l.weight.iter_mut());
            take(&mut l.bias.iter_mut());
        }
        if let Some(bp) = &mut self.bypass {
            take(&mut bp.iter_mut());
        }
        pos
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_trace(x).pop().unwrap())
    }

    /// Activations of every layer for one sample: `[x, a_1, .., a_{L-1}, y]`.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.layers.len() - 1;
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let a = trace.last().unwrap();
            let mut z: Vec<f64> = (0..l.out_dim())
                .map(|r| {
                    let row = l.weight.row(r);
                    row.iter().zip(a).fold(l.bias[r], |acc, (w, v)| acc + w * v)
                })
                .collect();
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            trace.push(z);
        }
        if let Some(bp) = &self.bypass {
            let y = trace.last_mut().unwrap();
            for (c, yc) in y.iter_mut().enumerate() {
                *yc += bp.column(c).iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
            }
        }
        trace
    }

    /// Gradients of `upstream · forward(x)` with respect to `x` and to every parameter.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, FlatParams)> {
        self.check_input(x)?;
        let mut grad = FlatParams::zeros(self.shape().layout());
        let dx = self.backward_accumulate(x, upstream, &mut grad.values)?;
        Ok((dx, grad))
    }

    /// Like [`Mlp::backward`] but adds the parameter gradient into `grad`
    /// (flat layout order) and returns the input gradient.
    pub fn backward_accumulate(&self, x: &[f64], upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::invalid(format!(
                "upstream gradient has length {}, network output is {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grad.len() != self.param_count() {
            return Err(Error::invalid("gradient buffer length does not match parameter count"));
        }
        let trace = self.forward_trace(x);
        let offsets = self.layer_offsets();
        let last = self.layers.len() - 1;

        let mut dx = vec![0.0; x.len()];
        if let Some(bp) = &self.bypass {
            let off = offsets[self.layers.len()];
            let out = self.output_dim();
            for (i, xi) in x.iter().enumerate() {
                for (c, g) in upstream.iter().enumerate() {
                    grad[off + i * out + c] += xi * g;
                    dx[i] += bp[[i, c]] * g;
                }
            }
        }

        let mut g = upstream.to_vec();
        for i in (0..=last).rev() {
            let l = &self.layers[i];
            let a_prev = &trace[i];
            let (n_out, n_in) = l.weight.dim();
            let w_off = offsets[i];
            let b_off = w_off + n_out * n_in;
            for r in 0..n_out {
                for c in 0..n_in {
                    grad[w_off + r * n_in + c] += g[r] * a_prev[c];
                }
                grad[b_off + r] += g[r];
            }
            let mut g_prev = vec![0.0; n_in];
            for r in 0..n_out {
                for c in 0..n_in {
                    g_prev[c] += l.weight[[r, c]] * g[r];
                }
            }
            if i == 0 {
                for (d, gp) in dx.iter_mut().zip(&g_prev) {
                    *d += gp;
                }
            } else {
                for (gp, a) in g_prev.iter_mut().zip(a_prev) {
                    *gp *= 1.0 - a * a;
                }
                g = g_prev;
            }
        }
        Ok(dx)
    }

    /// Flat offsets of each layer's weight block, followed by the bypass offset.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len() + 1);
        let mut o = 0;
        for l in &self.layers {
            offs.push(o);
            o += l.weight.len() + l.bias.len();
        }
        offs.push(o);
        offs
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch of row vectors `(batch, in_dim)`.
    pub fn forward_batch(&self, x: Array2<f64>) -> (Array2<f64>, BatchTape) {
        assert_eq!(x.ncols(), self.input_dim(), "batch input width");
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        for l in &self.layers[..last] {
            let prev = hidden.last().unwrap_or(&x);
            let mut z = prev.dot(&l.weight.t());
            z += &l.bias;
            z.mapv_inplace(f64::tanh);
            hidden.push(z);
        }
        let l = &self.layers[last];
        let prev = hidden.last().unwrap_or(&x);
        let mut y = prev.dot(&l.weight.t());
        y += &l.bias;
        if let Some(bp) = &self.bypass {
            general_mat_mul(1.0, &x, bp, 1.0, &mut y);
        }
        (y, BatchTape { input: x, hidden })
    }

    /// Backward pass for [`Mlp::forward_batch`]: adds parameter gradients
    /// (summed over the batch) into `grad` and returns the input gradient.
    pub fn backward_batch(&self, tape: &BatchTape, d_out: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut dx = Array2::zeros(tape.input.raw_dim());
        if let (Some(bp), Some(gbp)) = (&self.bypass, grad.bypass.as_mut()) {
            general_mat_mul(1.0, &tape.input.t(), d_out, 1.0, gbp);
            general_mat_mul(1.0, d_out, &bp.t(), 0.0, &mut dx);
        }
        let mut g = d_out.clone();
        for i in (0..=last).rev() {
            let l = &self.layers[i];
            let a_prev = if i == 0 { &tape.input } else { &tape.hidden[i - 1] };
            let gl = &mut grad.layers[i];
            general_mat_mul(1.0, &g.t(), a_prev, 1.0, &mut gl.weight);
            gl.bias += &g.sum_axis(Axis(0));
            if i == 0 {
                general_mat_mul(1.0, &g, &l.weight, 1.0, &mut dx);
            } else {
                let mut ga = g.dot(&l.weight);
                ga.zip_mut_with(a_prev, |gv, &a| *gv *= 1.0 - a * a);
                g = ga;
            }
        }
        dx
    }

    /// Upper bound on the Lipschitz constant of the map `x -> forward(x)`:
    /// product of layer Frobenius norms plus the bypass Frobenius norm.
    pub fn lipschitz_bound(&self) -> f64 {
        let fro = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let chain: f64 = self.layers.iter().map(|l| fro(&l.weight)).product();
        chain + self.bypass.as_ref().map_or(0.0, fro)
    }

    /// In-place `self += scale * other` over every parameter.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
        if let (Some(a), Some(b)) = (self.bypass.as_mut(), other.bypass.as_ref()) {
            a.scaled_add(scale, b);
        }
    }
}

fn xavier_fill<R: Rng + ?Sized>(m: &mut Array2<f64>, fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    m.iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
}
