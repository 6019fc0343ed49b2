//! Static batch normalization statistics.
//!
//! Training standardizes each batch with its own mean and biased variance.
//! Inference uses global statistics collected once per round, either from the
//! server's data alone or pooled across participants.

use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use super::ModelError;

/// Per-channel moments of one sBN layer's input.
///
/// `var` is the population (biased) variance over `count` elements per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Moments {
    /// Moments of an activation matrix whose columns cycle through `channels`.
    pub fn of_channels(x: &Matrix, channels: usize) -> Moments {
        let n = x.as_slice().len() / channels;
        let mut mean = vec![0.0; channels];
        for chunk in x.as_slice().chunks(channels) {
            for (m, v) in mean.iter_mut().zip(chunk) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; channels];
        for chunk in x.as_slice().chunks(channels) {
            for ((s, v), m) in var.iter_mut().zip(chunk).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        Moments {
            count: n as u64,
            mean,
            var,
        }
    }

    /// Variance with the `n - 1` denominator; zero when `count < 2`.
    pub fn unbiased_var(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.var.len()];
        }
        let scale = self.count as f64 / (self.count - 1) as f64;
        self.var.iter().map(|v| v * scale).collect()
    }
}

/// Global statistics of one sBN layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbnLayer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Global mean/variance for every sBN layer of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbnState {
    pub layers: Vec<SbnLayer>,
    /// Number of samples the statistics were computed from.
    pub sample_count: u64,
}

impl SbnState {
    pub(crate) fn check_widths(&self, widths: &[usize]) -> Result<(), ModelError> {
        let found: Vec<usize> = self.layers.iter().map(|l| l.mean.len()).collect();
        let ok = found == widths
            && self
                .layers
                .iter()
                .all(|l| l.var.len() == l.mean.len() && l.var.iter().all(|v| *v >= 0.0));
        if ok {
            Ok(())
        } else {
            Err(ModelError::shape(
                "sBN state",
                format!("layer widths {widths:?}"),
                format!("layer widths {found:?}"),
            ))
        }
    }

    /// Population statistics taken directly from one sweep of moments.
    pub fn from_moments(moments: &[Moments], sample_count: u64) -> SbnState {
        SbnState {
            layers: moments
                .iter()
                .map(|m| SbnLayer {
                    mean: m.mean.clone(),
                    var: m.var.clone(),
                })
                .collect(),
            sample_count,
        }
    }
}

/// One participant's contribution for one layer: `(N_m, mu_m, sigma_m^2)` with
/// the unbiased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerContribution {
    pub count: u64,
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

impl From<&Moments> for LayerContribution {
    fn from(m: &Moments) -> Self {
        LayerContribution {
            count: m.count,
            mean: m.mean.clone(),
            unbiased_var: m.unbiased_var(),
        }
    }
}

/// Count-weighted mean and pooled variance:
///
/// `mu = sum N_m mu_m / sum N_m`,
/// `sigma^2 = sum [(N_m - 1) sigma_m^2 + N_m (mu_m - mu)^2] / (sum N_m - 1)`.
pub fn pool_layer(parts: &[LayerContribution]) -> Result<SbnLayer, ModelError> {
    let total: u64 = parts.iter().map(|p| p.count).sum();
    if total == 0 {
        return Err(ModelError::DegenerateStatistics);
    }
    let width = parts[0].mean.len();
    if parts
        .iter()
        .any(|p| p.mean.len() != width || p.unbiased_var.len() != width)
    {
        return Err(ModelError::shape(
            "sBN contributions",
            format!("width {width}"),
            "mixed widths".to_string(),
        ));
    }
    let mut mean = vec![0.0; width];
    for p in parts {
        for (m, v) in mean.iter_mut().zip(&p.mean) {
            *m += p.count as f64 * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut var = vec![0.0; width];
    for p in parts {
        let n = p.count as f64;
        for k in 0..width {
            let d = p.mean[k] - mean[k];
            var[k] += (n - 1.0).max(0.0) * p.unbiased_var[k] + n * d * d;
        }
    }
    let denom = if total > 1 { (total - 1) as f64 } else { 1.0 };
    var.iter_mut().for_each(|v| *v /= denom);
    Ok(SbnLayer { mean, var })
}

/// Pools whole-network contributions; `parts[m][l]` is participant `m`, layer `l`.
pub fn pool_state(parts: &[Vec<LayerContribution>]) -> Result<SbnState, ModelError> {
    let first = parts.first().ok_or(ModelError::DegenerateStatistics)?;
    let layers = (0..first.len())
        .map(|l| {
            let column: Vec<LayerContribution> = parts.iter().map(|p| p[l].clone()).collect();
            pool_layer(&column)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sample_count = parts
        .iter()
        .map(|p| p.first().map(|c| c.count).unwrap_or(0))
        .sum();
    Ok(SbnState {
        layers,
        sample_count,
    })
}
