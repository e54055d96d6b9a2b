use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::{Error, Result};

/// Per-channel z-score statistics for inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

/// Mean and population standard deviation of every input and output channel.
pub fn fit_normalizer(ds: &Dataset) -> Result<NormStats> {
    let (u_mean, u_std) = channel_stats(&ds.u, "u")?;
    let (y_mean, y_std) = channel_stats(&ds.y, "y")?;
    Ok(NormStats {
        u_mean,
        u_std,
        y_mean,
        y_std,
    })
}

fn channel_stats(m: &Array2<f64>, prefix: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = m.nrows() as f64;
    let mut means = Vec::with_capacity(m.ncols());
    let mut stds = Vec::with_capacity(m.ncols());
    for (j, col) in m.axis_iter(Axis(1)).enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::DegenerateData(format!("channel {prefix}{j} has zero variance")));
        }
        means.push(mean);
        stds.push(var.sqrt());
    }
    Ok((means, stds))
}

impl NormStats {
    /// Statistics that leave data unchanged.
    pub fn identity(n_u: usize, n_y: usize) -> Self {
        Self {
            u_mean: vec![0.0; n_u],
            u_std: vec![1.0; n_u],
            y_mean: vec![0.0; n_y],
            y_std: vec![1.0; n_y],
        }
    }

    pub fn n_u(&self) -> usize {
        self.u_mean.len()
    }

    pub fn n_y(&self) -> usize {
        self.y_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.u_mean.len() != self.u_std.len() || self.y_mean.len() != self.y_std.len() {
            return Err(Error::invalid("normalisation mean/std lengths differ"));
        }
        let stds = self.u_std.iter().chain(&self.y_std);
        if stds.clone().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("normalisation standard deviations must be positive"));
        }
        Ok(())
    }

    /// Z-scored copy of `ds`.
    pub fn normalize(&self, ds: &Dataset) -> Result<Dataset> {
        self.check(ds)?;
        let mut u = ds.u.clone();
        let mut y = ds.y.clone();
        scale_columns(&mut u, &self.u_mean, &self.u_std, false);
        scale_columns(&mut y, &self.y_mean, &self.y_std, false);
        Dataset::new(u, y, ds.dt, ds.name.clone())
    }

    /// Inverse of [`NormStats::normalize`].
    pub fn denormalize(&self, ds: &Dataset) -> Result<Dataset> {
        self.check(ds)?;
        let mut u = ds.u.clone();
        let mut y = ds.y.clone();
        scale_columns(&mut u, &self.u_mean, &self.u_std, true);
        scale_columns(&mut y, &self.y_mean, &self.y_std, true);
        Dataset::new(u, y, ds.dt, ds.name.clone())
    }

    /// Maps normalised output rows back to physical units in place.
    pub fn denormalize_outputs(&self, y: &mut Array2<f64>) {
        scale_columns(y, &self.y_mean, &self.y_std, true);
    }

    pub fn normalize_input(&self, u: ArrayView1<f64>) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, v)| (v - self.u_mean[j]) / self.u_std[j])
            .collect()
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        if ds.n_u() != self.n_u() || ds.n_y() != self.n_y() {
            return Err(Error::invalid(format!(
                "normaliser is for {}/{} channels, dataset has {}/{}",
                self.n_u(),
                self.n_y(),
                ds.n_u(),
                ds.n_y()
            )));
        }
        Ok(())
    }
}

fn scale_columns(m: &mut Array2<f64>, mean: &[f64], std: &[f64], inverse: bool) {
    for (j, mut col) in m.axis_iter_mut(Axis(1)).enumerate() {
        if inverse {
            col.mapv_inplace(|v| v * std[j] + mean[j]);
        } else {
            col.mapv_inplace(|v| (v - mean[j]) / std[j]);
        }
    }
}
