//! Softmax classifier with static batch normalization and hand-derived gradients.
//!
//! Hidden blocks are `linear -> sBN -> ReLU` for vector inputs and
//! `conv3x3 -> sBN -> ReLU -> maxpool2x2` for image inputs. Image blocks end in a
//! global average pool. A dense head maps to class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sbn::{Moments, SbnState};
use super::tensor::{Matrix, ParamEntry, ParamSet};
use super::ModelError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Height x width x channels layout of an image sample, stored HWC row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths for vectors, conv channel counts for images.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub sbn_epsilon: f64,
    pub activation: Activation,
    /// When set, the model is a small CNN over this layout.
    pub image: Option<ImageShape>,
}

impl ModelConfig {
    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims,
            num_classes,
            sbn_epsilon: 1e-5,
            activation: Activation::Relu,
            image: None,
        }
    }

    pub fn cnn(image: ImageShape, channels: Vec<usize>, num_classes: usize) -> Self {
        ModelConfig {
            input_dim: image.len(),
            hidden_dims: channels,
            num_classes,
            sbn_epsilon: 1e-5,
            activation: Activation::Relu,
            image: Some(image),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(ModelError::Config("all dimensions must be >= 1".into()));
        }
        if self.sbn_epsilon.is_nan() || self.sbn_epsilon <= 0.0 {
            return Err(ModelError::Config(format!(
                "sbn_epsilon must be > 0, got {}",
                self.sbn_epsilon
            )));
        }
        if let Some(img) = self.image {
            if img.len() != self.input_dim {
                return Err(ModelError::Config(format!(
                    "image {}x{}x{} does not match input_dim {}",
                    img.height, img.width, img.channels, self.input_dim
                )));
            }
        }
        Ok(())
    }
}

/// Which statistics the sBN layers standardize with.
#[derive(Clone, Copy, Debug)]
pub enum NormSource<'a> {
    /// Statistics of the current batch (training mode).
    Batch,
    /// Aggregated global statistics (inference mode).
    Global(&'a SbnState),
}

#[derive(Clone, Debug)]
enum Stage {
    Dense {
        name: String,
        weight: usize,
        bias: Option<usize>,
        inputs: usize,
        outputs: usize,
    },
    Conv {
        name: String,
        weight: usize,
        height: usize,
        width: usize,
        cin: usize,
        cout: usize,
    },
    Norm {
        name: String,
        gamma: usize,
        beta: usize,
        channels: usize,
        layer: usize,
    },
    Relu {
        name: String,
    },
    MaxPool {
        name: String,
        height: usize,
        width: usize,
        channels: usize,
    },
    AvgPool {
        name: String,
        channels: usize,
    },
}

impl Stage {
    fn name(&self) -> &str {
        match self {
            Stage::Dense { name, .. }
            | Stage::Conv { name, .. }
            | Stage::Norm { name, .. }
            | Stage::Relu { name }
            | Stage::MaxPool { name, .. }
            | Stage::AvgPool { name, .. } => name,
        }
    }
}

enum Cache {
    Dense { input: Matrix },
    Conv { input: Matrix },
    Norm { xhat: Matrix, inv_std: Vec<f64>, batch: bool },
    Relu { output: Matrix },
    MaxPool { argmax: Vec<usize>, in_cols: usize },
    AvgPool { in_cols: usize },
}

/// The shared architecture `f(x, W)`: a fixed stage plan plus its parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    stages: Vec<Stage>,
    layout: Vec<(String, Vec<usize>)>,
    norm_widths: Vec<usize>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
        let mut norm_widths = Vec::new();
        let push = |layout: &mut Vec<(String, Vec<usize>)>, name: String, shape: Vec<usize>| {
            layout.push((name, shape));
            layout.len() - 1
        };

        let head_inputs = match config.image {
            None => {
                let mut width = config.input_dim;
                for (i, &h) in config.hidden_dims.iter().enumerate() {
                    let weight = push(&mut layout, format!("dense{i}.weight"), vec![width, h]);
                    stages.push(Stage::Dense {
                        name: format!("dense{i}"),
                        weight,
                        bias: None,
                        inputs: width,
                        outputs: h,
                    });
                    let gamma = push(&mut layout, format!("sbn{i}.gamma"), vec![h]);
                    let beta = push(&mut layout, format!("sbn{i}.beta"), vec![h]);
                    stages.push(Stage::Norm {
                        name: format!("sbn{i}"),
                        gamma,
                        beta,
                        channels: h,
                        layer: norm_widths.len(),
                    });
                    norm_widths.push(h);
                    stages.push(Stage::Relu {
                        name: format!("relu{i}"),
                    });
                    width = h;
                }
                width
            }
            Some(img) => {
                let (mut h, mut w, mut c) = (img.height, img.width, img.channels);
                for (i, &cout) in config.hidden_dims.iter().enumerate() {
                    let weight = push(&mut layout, format!("conv{i}.weight"), vec![3, 3, c, cout]);
                    stages.push(Stage::Conv {
                        name: format!("conv{i}"),
                        weight,
                        height: h,
                        width: w,
                        cin: c,
                        cout,
                    });
                    let gamma = push(&mut layout, format!("sbn{i}.gamma"), vec![cout]);
                    let beta = push(&mut layout, format!("sbn{i}.beta"), vec![cout]);
                    stages.push(Stage::Norm {
                        name: format!("sbn{i}"),
                        gamma,
                        beta,
                        channels: cout,
                        layer: norm_widths.len(),
                    });
                    norm_widths.push(cout);
                    stages.push(Stage::Relu {
                        name: format!("relu{i}"),
                    });
                    c = cout;
                    if h >= 2 && w >= 2 {
                        stages.push(Stage::MaxPool {
                            name: format!("pool{i}"),
                            height: h,
                            width: w,
                            channels: c,
                        });
                        h /= 2;
                        w /= 2;
                    }
                }
                stages.push(Stage::AvgPool {
                    name: "gap".into(),
                    channels: c,
                });
                c
            }
        };
        let weight = push(
            &mut layout,
            "head.weight".into(),
            vec![head_inputs, config.num_classes],
        );
        let bias = push(&mut layout, "head.bias".into(), vec![config.num_classes]);
        stages.push(Stage::Dense {
            name: "head".into(),
            weight,
            bias: Some(bias),
            inputs: head_inputs,
            outputs: config.num_classes,
        });
        Ok(Network {
            config,
            stages,
            layout,
            norm_widths,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Channel count of each sBN layer, in forward order.
    pub fn norm_widths(&self) -> &[usize] {
        &self.norm_widths
    }

    /// All-zero parameters with this network's layout.
    pub fn zero_params(&self) -> ParamSet {
        let entries = self
            .layout
            .iter()
            .map(|(n, s)| ParamEntry::zeros(n.clone(), s.clone()))
            .collect();
        ParamSet::new(entries).expect("layout shapes are consistent")
    }

    /// He-normal weights, unit sBN scale, zero shifts and biases.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.zero_params();
        for entry in params.entries_mut() {
            if entry.name.ends_with(".gamma") {
                entry.values.iter_mut().for_each(|v| *v = 1.0);
            } else if entry.name.ends_with(".weight") {
                let fan_in: usize = entry.shape[..entry.shape.len() - 1].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                entry
                    .values
                    .iter_mut()
                    .for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        params
    }

    fn check_params(&self, params: &ParamSet) -> Result<(), ModelError> {
        let entries = params.entries();
        if entries.len() != self.layout.len() {
            return Err(ModelError::shape(
                "parameters",
                format!("{} entries", self.layout.len()),
                format!("{} entries", entries.len()),
            ));
        }
        for ((name, shape), e) in self.layout.iter().zip(entries) {
            if *name != e.name || *shape != e.shape {
                return Err(ModelError::shape(
                    "parameters",
                    format!("`{name}` {shape:?}"),
                    format!("`{}` {:?}", e.name, e.shape),
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix, norm: NormSource<'_>) -> Result<(), ModelError> {
        if x.cols() != self.config.input_dim {
            return Err(ModelError::shape(
                "input batch",
                format!("{} features", self.config.input_dim),
                format!("{} features", x.cols()),
            ));
        }
        if x.rows() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        match norm {
            NormSource::Batch if x.rows() < 2 && !self.norm_widths.is_empty() => {
                Err(ModelError::DegenerateBatch(x.rows()))
            }
            NormSource::Global(state) => state.check_widths(&self.norm_widths),
            NormSource::Batch => Ok(()),
        }
    }

    fn run(
        &self,
        params: &ParamSet,
        norm: NormSource<'_>,
        x: &Matrix,
        mut caches: Option<&mut Vec<Cache>>,
        mut moments: Option<&mut Vec<Moments>>,
    ) -> Result<Matrix, ModelError> {
        self.check_params(params)?;
        self.check_input(x, norm)?;
        let mut act = x.clone();
        for stage in &self.stages {
            let (out, cache) = match stage {
                Stage::Dense {
                    weight,
                    bias,
                    inputs,
                    outputs,
                    ..
                } => {
                    let out = dense_forward(
                        &act,
                        params.values(*weight),
                        bias.map(|b| params.values(b)),
                        *inputs,
                        *outputs,
                    );
                    (out, Cache::Dense { input: act })
                }
                Stage::Conv {
                    weight,
                    height,
                    width,
                    cin,
                    cout,
                    ..
                } => {
                    let out =
                        conv_forward(&act, params.values(*weight), *height, *width, *cin, *cout);
                    (out, Cache::Conv { input: act })
                }
                Stage::Norm {
                    gamma,
                    beta,
                    channels,
                    layer,
                    ..
                } => {
                    let (mean, var, batch) = match norm {
                        NormSource::Batch => {
                            let m = Moments::of_channels(&act, *channels);
                            let out = (m.mean.clone(), m.var.clone(), true);
                            if let Some(ms) = moments.as_deref_mut() {
                                ms.push(m);
                            }
                            out
                        }
                        NormSource::Global(state) => {
                            let l = &state.layers[*layer];
                            (l.mean.clone(), l.var.clone(), false)
                        }
                    };
                    let eps = self.config.sbn_epsilon;
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let g = params.values(*gamma);
                    let b = params.values(*beta);
                    let mut xhat = act;
                    let mut out = Matrix::zeros(xhat.rows(), xhat.cols());
                    for (xr, or) in xhat
                        .as_mut_slice()
                        .chunks_mut(*channels)
                        .zip(out.as_mut_slice().chunks_mut(*channels))
                    {
                        for c in 0..*channels {
                            let h = (xr[c] - mean[c]) * inv_std[c];
                            xr[c] = h;
                            or[c] = h * g[c] + b[c];
                        }
                    }
                    (
                        out,
                        Cache::Norm {
                            xhat,
                            inv_std,
                            batch,
                        },
                    )
                }
                Stage::Relu { .. } => {
                    let mut out = act;
                    out.as_mut_slice()
                        .iter_mut()
                        .for_each(|v| *v = v.max(0.0));
                    let cache = if caches.is_some() {
                        out.clone()
                    } else {
                        Matrix::zeros(0, 0)
                    };
                    (out, Cache::Relu { output: cache })
                }
                Stage::MaxPool {
                    height,
                    width,
                    channels,
                    ..
                } => {
                    let in_cols = act.cols();
                    let (out, argmax) = maxpool_forward(&act, *height, *width, *channels);
                    (out, Cache::MaxPool { argmax, in_cols })
                }
                Stage::AvgPool { channels, .. } => {
                    let in_cols = act.cols();
                    (avgpool_forward(&act, *channels), Cache::AvgPool { in_cols })
                }
            };
            if !out.is_finite() {
                return Err(ModelError::NonFinite {
                    layer: stage.name().to_string(),
                });
            }
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            act = out;
        }
        Ok(act)
    }

    /// Raw class scores before the softmax.
    pub fn logits(
        &self,
        params: &ParamSet,
        norm: NormSource<'_>,
        x: &Matrix,
    ) -> Result<Matrix, ModelError> {
        self.run(params, norm, x, None, None)
    }

    /// Class probabilities; every row lies on the simplex.
    pub fn forward(
        &self,
        params: &ParamSet,
        norm: NormSource<'_>,
        x: &Matrix,
    ) -> Result<Matrix, ModelError> {
        let mut z = self.logits(params, norm, x)?;
        for r in 0..z.rows() {
            softmax_in_place(z.row_mut(r));
        }
        Ok(z)
    }

    /// Per-layer batch moments seen by each sBN layer when `x` is forwarded as
    /// one batch in training mode.
    pub fn layer_moments(&self, params: &ParamSet, x: &Matrix) -> Result<Vec<Moments>, ModelError> {
        let mut moments = Vec::with_capacity(self.norm_widths.len());
        self.run(params, NormSource::Batch, x, None, Some(&mut moments))?;
        Ok(moments)
    }

    /// Mean cross-entropy against convex target weights, and its gradient.
    pub fn loss_and_grad(
        &self,
        params: &ParamSet,
        x: &Matrix,
        targets: &Matrix,
        norm: NormSource<'_>,
    ) -> Result<(f64, ParamSet), ModelError> {
        if targets.rows() != x.rows() || targets.cols() != self.config.num_classes {
            return Err(ModelError::shape(
                "targets",
                format!("{}x{}", x.rows(), self.config.num_classes),
                format!("{}x{}", targets.rows(), targets.cols()),
            ));
        }
        let mut caches = Vec::with_capacity(self.stages.len());
        let logits = self.run(params, norm, x, Some(&mut caches), None)?;
        let batch = x.rows() as f64;
        let mut loss = 0.0;
        let mut delta = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            let z = logits.row(r);
            let t = targets.row(r);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
            let mass: f64 = t.iter().sum();
            let d = delta.row_mut(r);
            for k in 0..z.len() {
                let logp = z[k] - lse;
                if t[k] != 0.0 {
                    loss -= t[k] * logp;
                }
                d[k] = (logp.exp() * mass - t[k]) / batch;
            }
        }
        loss /= batch;
        if !loss.is_finite() {
            return Err(ModelError::NonFinite {
                layer: "loss".into(),
            });
        }
        let grad = self.backward(params, caches, delta)?;
        Ok((loss, grad))
    }

    fn backward(
        &self,
        params: &ParamSet,
        caches: Vec<Cache>,
        mut delta: Matrix,
    ) -> Result<ParamSet, ModelError> {
        let mut grad = params.zeros_like();
        for (stage, cache) in self.stages.iter().zip(caches).rev() {
            delta = match (stage, cache) {
                (
                    Stage::Dense {
                        weight,
                        bias,
                        inputs,
                        outputs,
                        ..
                    },
                    Cache::Dense { input },
                ) => {
                    let w = params.values(*weight);
                    dense_weight_grad(&input, &delta, grad.values_mut(*weight), *inputs, *outputs);
                    if let Some(b) = bias {
                        let gb = grad.values_mut(*b);
                        for row in delta.iter_rows() {
                            for (g, d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                    dense_input_grad(&delta, w, *inputs, *outputs)
                }
                (
                    Stage::Conv {
                        weight,
                        height,
                        width,
                        cin,
                        cout,
                        ..
                    },
                    Cache::Conv { input },
                ) => {
                    let w = params.values(*weight).to_vec();
                    conv_backward(
                        &input,
                        &delta,
                        &w,
                        grad.values_mut(*weight),
                        *height,
                        *width,
                        *cin,
                        *cout,
                    )
                }
                (
                    Stage::Norm {
                        gamma,
                        beta,
                        channels,
                        ..
                    },
                    Cache::Norm {
                        xhat,
                        inv_std,
                        batch,
                    },
                ) => {
                    let c = *channels;
                    let g = params.values(*gamma).to_vec();
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    for (dr, xr) in delta
                        .as_slice()
                        .chunks(c)
                        .zip(xhat.as_slice().chunks(c))
                    {
                        for k in 0..c {
                            sum_dy[k] += dr[k];
                            sum_dy_xhat[k] += dr[k] * xr[k];
                        }
                    }
                    grad.values_mut(*gamma)
                        .iter_mut()
                        .zip(&sum_dy_xhat)
                        .for_each(|(a, b)| *a += b);
                    grad.values_mut(*beta)
                        .iter_mut()
                        .zip(&sum_dy)
                        .for_each(|(a, b)| *a += b);
                    let mut dx = Matrix::zeros(delta.rows(), delta.cols());
                    let n = (delta.as_slice().len() / c) as f64;
                    for ((dxr, dr), xr) in dx
                        .as_mut_slice()
                        .chunks_mut(c)
                        .zip(delta.as_slice().chunks(c))
                        .zip(xhat.as_slice().chunks(c))
                    {
                        for k in 0..c {
                            dxr[k] = if batch {
                                g[k] * inv_std[k]
                                    * (dr[k] - sum_dy[k] / n - xr[k] * sum_dy_xhat[k] / n)
                            } else {
                                g[k] * inv_std[k] * dr[k]
                            };
                        }
                    }
                    dx
                }
                (Stage::Relu { .. }, Cache::Relu { output }) => {
                    let mut d = delta;
                    for (v, o) in d.as_mut_slice().iter_mut().zip(output.as_slice()) {
                        if *o <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    d
                }
                (Stage::MaxPool { .. }, Cache::MaxPool { argmax, in_cols }) => {
                    let mut dx = Matrix::zeros(delta.rows(), in_cols);
                    let out_cols = delta.cols();
                    for r in 0..delta.rows() {
                        let dr = delta.row(r);
                        let am = &argmax[r * out_cols..(r + 1) * out_cols];
                        let dxr = dx.row_mut(r);
                        for (d, &src) in dr.iter().zip(am) {
                            dxr[src] += d;
                        }
                    }
                    dx
                }
                (Stage::AvgPool { channels, .. }, Cache::AvgPool { in_cols }) => {
                    let c = *channels;
                    let spatial = in_cols / c;
                    let mut dx = Matrix::zeros(delta.rows(), in_cols);
                    for r in 0..delta.rows() {
                        let dr = delta.row(r).to_vec();
                        for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                            *v = dr[j % c] / spatial as f64;
                        }
                    }
                    dx
                }
                _ => unreachable!("cache kind always matches its stage"),
            };
        }
        if !grad.is_finite() {
            return Err(ModelError::NonFinite {
                layer: "gradient".into(),
            });
        }
        Ok(grad)
    }
}

/// Numerically stable softmax over one row.
pub fn softmax_in_place(z: &mut [f64]) {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - zmax).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn dense_forward(
    x: &Matrix,
    w: &[f64],
    b: Option<&[f64]>,
    inputs: usize,
    outputs: usize,
) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), outputs);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let or = out.row_mut(r);
        if let Some(b) = b {
            or.copy_from_slice(b);
        }
        for i in 0..inputs {
            let xi = xr[i];
            let wr = &w[i * outputs..(i + 1) * outputs];
            for (o, wv) in or.iter_mut().zip(wr) {
                *o += xi * wv;
            }
        }
    }
    out
}

fn dense_weight_grad(x: &Matrix, delta: &Matrix, gw: &mut [f64], inputs: usize, outputs: usize) {
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dr = delta.row(r);
        for i in 0..inputs {
            let xi = xr[i];
            let gr = &mut gw[i * outputs..(i + 1) * outputs];
            for (g, d) in gr.iter_mut().zip(dr) {
                *g += xi * d;
            }
        }
    }
}

fn dense_input_grad(delta: &Matrix, w: &[f64], inputs: usize, outputs: usize) -> Matrix {
    let mut dx = Matrix::zeros(delta.rows(), inputs);
    for r in 0..delta.rows() {
        let dr = delta.row(r);
        let dxr = dx.row_mut(r);
        for i in 0..inputs {
            let wr = &w[i * outputs..(i + 1) * outputs];
            dxr[i] = wr.iter().zip(dr).map(|(a, b)| a * b).sum();
        }
    }
    dx
}

fn conv_forward(x: &Matrix, w: &[f64], h: usize, wd: usize, cin: usize, cout: usize) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), h * wd * cout);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for y in 0..h {
            for xx in 0..wd {
                let o = &mut or[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let base = (iy as usize * wd + ix as usize) * cin;
                        for ci in 0..cin {
                            let v = xr[base + ci];
                            let wr = &w[((ky * 3 + kx) * cin + ci) * cout..][..cout];
                            for (ov, wv) in o.iter_mut().zip(wr) {
                                *ov += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Matrix,
    delta: &Matrix,
    w: &[f64],
    gw: &mut [f64],
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
) -> Matrix {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dr = delta.row(r);
        let dxr = dx.row_mut(r);
        for y in 0..h {
            for xx in 0..wd {
                let d = &dr[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let base = (iy as usize * wd + ix as usize) * cin;
                        for ci in 0..cin {
                            let off = ((ky * 3 + kx) * cin + ci) * cout;
                            let v = xr[base + ci];
                            let mut acc = 0.0;
                            for co in 0..cout {
                                gw[off + co] += v * d[co];
                                acc += w[off + co] * d[co];
                            }
                            dxr[base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn maxpool_forward(x: &Matrix, h: usize, w: usize, c: usize) -> (Matrix, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let out_cols = oh * ow * c;
    let mut out = Matrix::zeros(x.rows(), out_cols);
    let mut argmax = vec![0usize; x.rows() * out_cols];
    for r in 0..x.rows() {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let mut best = (2 * y * w + 2 * xx) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        if xr[idx] > xr[best] {
                            best = idx;
                        }
                    }
                    let o = (y * ow + xx) * c + ch;
                    or[o] = xr[best];
                    argmax[r * out_cols + o] = best;
                }
            }
        }
    }
    (out, argmax)
}

fn avgpool_forward(x: &Matrix, c: usize) -> Matrix {
    let spatial = x.cols() / c;
    let mut out = Matrix::zeros(x.rows(), c);
    for r in 0..x.rows() {
        let or = out.row_mut(r);
        for (j, v) in x.row(r).iter().enumerate() {
            or[j % c] += v;
        }
        or.iter_mut().for_each(|v| *v /= spatial as f64);
    }
    out
}
