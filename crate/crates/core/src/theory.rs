//! Nonparametric view of SSL with strong augmentation: a box-kernel
//! Nadaraya-Watson classifier, the three-step pseudo-labeling construction
//! (select confident points, augment them, retrain on the union) and Monte-Carlo
//! excess-risk estimates along a growing unlabeled sample.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Matrix;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid theory config: {0}")]
    Config(String),
    #[error("writing rate table: {0}")]
    Csv(#[from] csv::Error),
}

/// Box-kernel Nadaraya-Watson estimate of `P(Y = 1 | X = x)` and its plug-in
/// classifier. Points are indexed by their first coordinate so a query only
/// scans the slab `|x_0 - X_0| <= h`.
#[derive(Clone, Debug)]
pub struct KernelClassifier {
    points: Matrix,
    labels: Vec<u8>,
    bandwidth: f64,
    order: Vec<usize>,
    keys: Vec<f64>,
}

impl KernelClassifier {
    /// An empty point set is allowed; it estimates 0 everywhere.
    pub fn new(points: Matrix, labels: Vec<u8>, bandwidth: f64) -> Result<Self, TheoryError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(TheoryError::Config(format!("bandwidth {bandwidth} must be > 0")));
        }
        if points.rows() != labels.len() {
            return Err(TheoryError::Config(format!(
                "{} points but {} labels",
                points.rows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(TheoryError::Config("labels must be 0 or 1".into()));
        }
        if points.cols() == 0 && points.rows() > 0 {
            return Err(TheoryError::Config("points need at least one coordinate".into()));
        }
        let mut order: Vec<usize> = (0..points.rows()).collect();
        order.sort_by(|&a, &b| points.row(a)[0].total_cmp(&points.row(b)[0]));
        let keys = order.iter().map(|&i| points.row(i)[0]).collect();
        Ok(KernelClassifier {
            points,
            labels,
            bandwidth,
            order,
            keys,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// `(neighbors, neighbors labeled 1)` with `||(x - X_i) / h|| <= 1`.
    pub fn neighbor_counts(&self, x: &[f64]) -> (usize, usize) {
        let h = self.bandwidth;
        let lo = self.keys.partition_point(|k| (x[0] - k) / h > 1.0);
        let hi = self.keys.partition_point(|k| (k - x[0]) / h <= 1.0);
        let mut n = 0;
        let mut ones = 0;
        for &i in &self.order[lo..hi.max(lo)] {
            let norm2: f64 = self
                .points
                .row(i)
                .iter()
                .zip(x)
                .map(|(p, q)| {
                    let u = (q - p) / h;
                    u * u
                })
                .sum();
            if norm2 <= 1.0 {
                n += 1;
                ones += self.labels[i] as usize;
            }
        }
        (n, ones)
    }

    /// `m_hat(x)`, or `None` when no stored point lies within the bandwidth.
    pub fn try_estimate(&self, x: &[f64]) -> Option<f64> {
        match self.neighbor_counts(x) {
            (0, _) => None,
            (n, ones) => Some(ones as f64 / n as f64),
        }
    }

    /// `m_hat(x)`, 0 when no stored point lies within the bandwidth.
    pub fn nw_estimate(&self, x: &[f64]) -> f64 {
        self.try_estimate(x).unwrap_or(0.0)
    }

    /// `1{m_hat(x) - 1/2}` with the indicator of a non-negative argument, so
    /// an estimate of exactly 1/2 maps to class 1.
    pub fn classify(&self, x: &[f64]) -> u8 {
        threshold_half(self.nw_estimate(x))
    }
}

pub fn threshold_half(m: f64) -> u8 {
    u8::from(m >= 0.5)
}

/// A sampling distribution with independent coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Normal { std: f64 },
    Laplace { scale: f64 },
}

impl Sampler {
    fn validate(&self) -> Result<(), TheoryError> {
        let s = match *self {
            Sampler::Normal { std } => std,
            Sampler::Laplace { scale } => scale,
        };
        if s > 0.0 && s.is_finite() {
            Ok(())
        } else {
            Err(TheoryError::Config(format!("sampler scale {s} must be > 0")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, dim: usize, rng: &mut R) -> Matrix {
        let data: Vec<f64> = match *self {
            Sampler::Normal { std } => {
                let d = Normal::new(0.0, std).expect("validated scale");
                (0..n * dim).map(|_| d.sample(rng)).collect()
            }
            Sampler::Laplace { scale } => {
                let d = Exp::new(1.0 / scale).expect("validated scale");
                (0..n * dim)
                    .map(|_| {
                        let v: f64 = d.sample(rng);
                        if rng.random::<bool>() { v } else { -v }
                    })
                    .collect()
            }
        };
        Matrix::from_vec(n, dim, data).expect("n * dim values")
    }
}

/// Closed-form `P(Y = 1 | X = x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Conditional {
    /// `1 / (1 + exp(-beta . x))`.
    Logistic { beta: Vec<f64> },
    Constant { p: f64 },
}

/// Known-`m` binary task with separate labeled and unlabeled marginals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub dim: usize,
    pub conditional: Conditional,
    pub labeled: Sampler,
    pub unlabeled: Sampler,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            dim: 1,
            conditional: Conditional::Logistic { beta: vec![2.0] },
            labeled: Sampler::Normal { std: 1.0 },
            unlabeled: Sampler::Laplace { scale: 2.0 },
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.dim == 0 {
            return Err(TheoryError::Config("dim must be >= 1".into()));
        }
        match &self.conditional {
            Conditional::Logistic { beta } if beta.len() != self.dim => {
                return Err(TheoryError::Config(format!(
                    "beta has {} entries for dim {}",
                    beta.len(),
                    self.dim
                )))
            }
            Conditional::Constant { p } if !(0.0..=1.0).contains(p) => {
                return Err(TheoryError::Config(format!("constant p {p} outside [0, 1]")))
            }
            _ => {}
        }
        self.labeled.validate()?;
        self.unlabeled.validate()
    }

    pub fn m(&self, x: &[f64]) -> f64 {
        match &self.conditional {
            Conditional::Logistic { beta } => {
                let z: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
                1.0 / (1.0 + (-z).exp())
            }
            Conditional::Constant { p } => *p,
        }
    }

    pub fn bayes(&self, x: &[f64]) -> u8 {
        threshold_half(self.m(x))
    }

    /// Draws from the labeled marginal with `Y ~ Bernoulli(m(X))`.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Matrix, Vec<u8>) {
        let x = self.labeled.sample(n, self.dim, rng);
        let y = x
            .iter_rows()
            .map(|r| u8::from(rng.random::<f64>() < self.m(r)))
            .collect();
        (x, y)
    }

    pub fn sample_unlabeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        self.unlabeled.sample(n, self.dim, rng)
    }
}

/// Indices whose initial estimate is within `delta` of 0 or 1. Points with no
/// neighbor under the initial estimator carry no evidence and are skipped.
pub fn select_high_confidence(m_init: &KernelClassifier, x_u: &Matrix, delta: f64) -> Vec<usize> {
    let estimates: Vec<Option<f64>> = x_u.iter_rows().map(|r| m_init.try_estimate(r)).collect();
    select_by_estimates(&estimates, delta)
}

/// Indices `i` with `min(1 - m_i, m_i) <= delta`; `None` entries never qualify.
pub fn select_by_estimates(estimates: &[Option<f64>], delta: f64) -> Vec<usize> {
    estimates
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.filter(|m| m.min(1.0 - m) <= delta).map(|_| i))
        .collect()
}

/// Map applied to a confident point before it joins the training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOperator {
    Identity,
    /// `gamma * x` with `gamma ~ Uniform(0, 1)`.
    UniformShrink,
}

impl AugmentOperator {
    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        match self {
            AugmentOperator::Identity => x.to_vec(),
            AugmentOperator::UniformShrink => {
                let gamma: f64 = rng.random();
                x.iter().map(|v| gamma * v).collect()
            }
        }
    }
}

/// Augmented points paired with the pseudo-label of the point they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct HighConfidenceSet {
    pub x: Matrix,
    pub labels: Vec<u8>,
    /// Row of `x_u` each augmented point was generated from.
    pub sources: Vec<usize>,
}

/// One `(Y_hat, X_tilde)` pair per selected row; the label is computed on the
/// original point.
pub fn augment_and_pseudolabel<R: Rng + ?Sized>(
    x_u: &Matrix,
    selected: &[usize],
    m_init: &KernelClassifier,
    operator: AugmentOperator,
    rng: &mut R,
) -> HighConfidenceSet {
    let mut data = Vec::with_capacity(selected.len() * x_u.cols());
    let mut labels = Vec::with_capacity(selected.len());
    for &i in selected {
        let x = x_u.row(i);
        labels.push(m_init.classify(x));
        data.extend(operator.apply(x, rng));
    }
    HighConfidenceSet {
        x: Matrix::from_vec(selected.len(), x_u.cols(), data).expect("one row per selection"),
        labels,
        sources: selected.to_vec(),
    }
}

/// Classifier over the union of labeled and pseudo-labeled points, duplicates kept.
pub fn train_ssl(
    labeled_x: &Matrix,
    labeled_y: &[u8],
    high: &HighConfidenceSet,
    bandwidth: f64,
) -> Result<KernelClassifier, TheoryError> {
    if labeled_y.is_empty() && high.labels.is_empty() {
        return Err(TheoryError::Config(
            "labeled and pseudo-labeled sets are both empty".into(),
        ));
    }
    let dim = if labeled_y.is_empty() {
        high.x.cols()
    } else {
        labeled_x.cols()
    };
    if !high.labels.is_empty() && high.x.cols() != dim {
        return Err(TheoryError::Config(format!(
            "labeled points have {dim} coordinates, augmented points {}",
            high.x.cols()
        )));
    }
    let mut data = Vec::with_capacity((labeled_y.len() + high.labels.len()) * dim);
    data.extend_from_slice(labeled_x.as_slice());
    data.extend_from_slice(high.x.as_slice());
    let mut labels = labeled_y.to_vec();
    labels.extend_from_slice(&high.labels);
    let points = Matrix::from_vec(labels.len(), dim, data).expect("rows match labels");
    KernelClassifier::new(points, labels, bandwidth)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub se: f64,
}

/// `E[|2m(X) - 1| * 1{C(X) != Bayes(X)}]` over `n_mc` draws from the labeled marginal.
pub fn excess_risk(
    classify: impl Fn(&[f64]) -> u8,
    task: &SyntheticTask,
    n_mc: usize,
    seed: u64,
) -> RiskEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = task.labeled.sample(n_mc, task.dim, &mut rng);
    excess_risk_on(classify, task, &x)
}

/// The same estimate on fixed evaluation points.
pub fn excess_risk_on(classify: impl Fn(&[f64]) -> u8, task: &SyntheticTask, x: &Matrix) -> RiskEstimate {
    let terms: Vec<f64> = x
        .iter_rows()
        .map(|r| {
            if classify(r) == task.bayes(r) {
                0.0
            } else {
                (2.0 * task.m(r) - 1.0).abs()
            }
        })
        .collect();
    let n = terms.len() as f64;
    if terms.is_empty() {
        return RiskEstimate { mean: 0.0, se: 0.0 };
    }
    let mean = terms.iter().sum::<f64>() / n;
    let var = if terms.len() > 1 {
        terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    RiskEstimate {
        mean,
        se: (var / n).sqrt(),
    }
}

/// Margin/smoothness exponents that fix the bandwidth rule and the reported rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginParams {
    pub alpha: f64,
    pub q: f64,
    pub s: f64,
    pub v: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginParams {
            alpha: 1.0,
            q: 1.0,
            s: 1.0,
            v: 0.0,
        }
    }
}

impl MarginParams {
    pub fn rho(&self) -> f64 {
        self.v + self.s
    }

    /// `q(alpha + 1) / (q(alpha + 3 + rho) + d)`: the rate in `n_u` the risk decays at.
    pub fn ssl_rate(&self, d: usize) -> f64 {
        self.q * (self.alpha + 1.0) / (self.q * (self.alpha + 3.0 + self.rho()) + d as f64)
    }

    /// Exponent `e` of the SSL bandwidth `h ~ n_u^-e`.
    pub fn ssl_bandwidth_exponent(&self, d: usize) -> f64 {
        1.0 / (self.q * (self.alpha + 3.0 + self.rho()) + d as f64)
    }

    /// Exponent of the labeled-only bandwidth `h ~ n_la^-e`.
    pub fn labeled_bandwidth_exponent(&self, d: usize) -> f64 {
        1.0 / (self.q * (self.alpha + 3.0) + d as f64)
    }

    /// Labeled-size exponent above which labeled-only training keeps up with SSL.
    pub fn zeta_threshold(&self, d: usize) -> f64 {
        let d = d as f64;
        ((self.alpha + 3.0) * self.q + d) / ((self.alpha + 3.0 + self.rho()) * self.q + d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Confidence slack of the selection step, in `(0, 1/2)`.
    pub delta: f64,
    /// `n_la = round(n_u^zeta)`.
    pub zeta: f64,
    /// Labeled draws behind the initial estimator.
    pub n_init: usize,
    pub n_u_grid: Vec<usize>,
    pub augment: AugmentOperator,
    pub mc_samples: usize,
    /// Constant `c` in every bandwidth `h = c * n^-e`.
    pub bandwidth_scale: f64,
    pub margin: MarginParams,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            delta: 0.1,
            zeta: 0.5,
            n_init: 100,
            n_u_grid: vec![200, 800, 3200, 12800],
            augment: AugmentOperator::UniformShrink,
            mc_samples: 20_000,
            bandwidth_scale: 1.0,
            margin: MarginParams::default(),
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let fail = |m: String| Err(TheoryError::Config(m));
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return fail(format!("delta {} outside (0, 1/2)", self.delta));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return fail(format!("zeta {} outside (0, 1)", self.zeta));
        }
        if self.n_init == 0 {
            return fail("n_init must be >= 1".into());
        }
        if self.n_u_grid.is_empty() || self.n_u_grid.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "n_u grid {:?} must be nonempty and strictly increasing",
                self.n_u_grid
            ));
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be >= 1".into());
        }
        if !(self.bandwidth_scale > 0.0 && self.bandwidth_scale.is_finite()) {
            return fail(format!("bandwidth_scale {} must be > 0", self.bandwidth_scale));
        }
        let m = &self.margin;
        if [m.alpha, m.q, m.s, m.v].iter().any(|v| !(v.is_finite() && *v >= 0.0)) || m.q == 0.0 {
            return fail(format!("margin exponents {m:?} must be finite, >= 0, with q > 0"));
        }
        Ok(())
    }

    pub fn n_la(&self, n_u: usize) -> usize {
        (n_u as f64).powf(self.zeta).round() as usize
    }

    fn bandwidth(&self, n: usize, exponent: f64) -> f64 {
        self.bandwidth_scale * (n.max(1) as f64).powf(-exponent)
    }
}

/// One `(n_u, seed)` cell of a rate experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n_u: usize,
    pub n_la: usize,
    pub seed: u64,
    pub risk_ssl: RiskEstimate,
    pub risk_labeled: RiskEstimate,
    pub high_confidence: usize,
    /// No point passed the selection step; `risk_ssl` repeats the labeled-only risk.
    pub empty_high: bool,
}

/// Per-`n_u` medians over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub n_u: usize,
    pub n_la: usize,
    pub median_ssl: f64,
    pub median_labeled: f64,
    /// Median Monte-Carlo standard error of the SSL risk.
    pub se_ssl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
    pub summary: Vec<RateSummary>,
    /// Least-squares slope of `ln(median_ssl)` on `ln(n_u)`; `None` with fewer
    /// than two positive medians.
    pub slope_fit: Option<f64>,
    /// `-ssl_rate(d)`, the slope the bound predicts.
    pub theoretical_slope: f64,
    pub zeta_threshold: f64,
}

#[derive(Serialize)]
struct CsvRow {
    n_u: usize,
    n_la: usize,
    seed: u64,
    risk_ssl: f64,
    risk_labeled: f64,
    slope_fit: Option<f64>,
}

impl RateTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TheoryError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRow {
                n_u: r.n_u,
                n_la: r.n_la,
                seed: r.seed,
                risk_ssl: r.risk_ssl.mean,
                risk_labeled: r.risk_labeled.mean,
                slope_fit: self.slope_fit,
            })?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => (values[n / 2 - 1] + values[n / 2]) / 2.0,
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

mod streams {
    pub const INIT: u64 = 1;
    pub const LABELED: u64 = 2;
    pub const UNLABELED: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const EVAL: u64 = 5;
}

fn cell_rng(seed: u64, n_u: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n_u as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// The initial estimator and the evaluation sample depend on the seed only,
/// so every grid cell of one seed shares them.
fn run_cell(task: &SyntheticTask, cfg: &TheoryConfig, n_u: usize, seed: u64) -> Result<RateRow, TheoryError> {
    let d = task.dim;
    let (xi, yi) = task.sample_labeled(cfg.n_init, &mut cell_rng(seed, 0, streams::INIT));
    let h_init = cfg.bandwidth_scale * (cfg.n_init as f64).powf(-1.0 / (2.0 + d as f64));
    let m_init = KernelClassifier::new(xi, yi, h_init)?;
    let eval = task.labeled.sample(cfg.mc_samples, d, &mut cell_rng(seed, 0, streams::EVAL));

    let n_la = cfg.n_la(n_u);
    let (xl, yl) = task.sample_labeled(n_la, &mut cell_rng(seed, n_u, streams::LABELED));
    let h_la = cfg.bandwidth(n_la, cfg.margin.labeled_bandwidth_exponent(d));
    let labeled = KernelClassifier::new(xl.clone(), yl.clone(), h_la)?;
    let risk_labeled = excess_risk_on(|x| labeled.classify(x), task, &eval);

    let xu = task.sample_unlabeled(n_u, &mut cell_rng(seed, n_u, streams::UNLABELED));
    let selected = select_high_confidence(&m_init, &xu, cfg.delta);
    let high = augment_and_pseudolabel(
        &xu,
        &selected,
        &m_init,
        cfg.augment,
        &mut cell_rng(seed, n_u, streams::AUGMENT),
    );
    let (risk_ssl, empty_high) = if high.labels.is_empty() {
        (risk_labeled, true)
    } else {
        let h = cfg.bandwidth(n_u, cfg.margin.ssl_bandwidth_exponent(d));
        let ssl = train_ssl(&xl, &yl, &high, h)?;
        (excess_risk_on(|x| ssl.classify(x), task, &eval), false)
    };
    Ok(RateRow {
        n_u,
        n_la,
        seed,
        risk_ssl,
        risk_labeled,
        high_confidence: high.labels.len(),
        empty_high,
    })
}

/// Runs every `(n_u, seed)` cell, then summarizes per `n_u` and fits the
/// log-log slope of the median SSL risk.
pub fn rate_experiment(task: &SyntheticTask, cfg: &TheoryConfig, seeds: &[u64]) -> Result<RateTable, TheoryError> {
    task.validate()?;
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(TheoryError::Config("at least one seed is required".into()));
    }
    let cells: Vec<(usize, u64)> = cfg
        .n_u_grid
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let rows: Vec<RateRow> = cells
        .par_iter()
        .map(|&(n_u, seed)| run_cell(task, cfg, n_u, seed))
        .collect::<Result<_, _>>()?;
    let summary: Vec<RateSummary> = cfg
        .n_u_grid
        .iter()
        .map(|&n_u| {
            let cell: Vec<&RateRow> = rows.iter().filter(|r| r.n_u == n_u).collect();
            let pick = |f: fn(&RateRow) -> f64| median(&mut cell.iter().map(|r| f(r)).collect::<Vec<_>>());
            RateSummary {
                n_u,
                n_la: cfg.n_la(n_u),
                median_ssl: pick(|r| r.risk_ssl.mean),
                median_labeled: pick(|r| r.risk_labeled.mean),
                se_ssl: pick(|r| r.risk_ssl.se),
            }
        })
        .collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) = summary
        .iter()
        .filter(|s| s.median_ssl > 0.0)
        .map(|s| ((s.n_u as f64).ln(), s.median_ssl.ln()))
        .unzip();
    Ok(RateTable {
        rows,
        summary,
        slope_fit: ls_slope(&lx, &ly),
        theoretical_slope: -cfg.margin.ssl_rate(task.dim),
        zeta_threshold: cfg.margin.zeta_threshold(task.dim),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(points: &[f64], labels: &[u8], h: f64) -> KernelClassifier {
        let x = Matrix::from_vec(points.len(), 1, points.to_vec()).unwrap();
        KernelClassifier::new(x, labels.to_vec(), h).unwrap()
    }

    #[test]
    fn estimate_examples() {
        let clf = one_d(&[0.0, 1.0], &[0, 1], 0.5);
        assert_eq!(clf.nw_estimate(&[0.2]), 0.0);
        assert_eq!(clf.nw_estimate(&[5.0]), 0.0);
        assert_eq!(clf.try_estimate(&[5.0]), None);
        assert_eq!(clf.nw_estimate(&[0.5]), 0.5);
        let ones = one_d(&[0.0, 0.1, 0.3], &[1, 1, 1], 0.2);
        assert_eq!(ones.nw_estimate(&[0.2]), 1.0);
    }

    #[test]
    fn classify_boundary_is_class_one() {
        assert_eq!(threshold_half(0.9), 1);
        assert_eq!(threshold_half(0.1), 0);
        assert_eq!(threshold_half(0.5), 1);
        let clf = one_d(&[0.0, 1.0], &[0, 1], 0.5);
        assert_eq!(clf.classify(&[0.5]), 1);
    }

    #[test]
    fn selection_examples() {
        let v = [Some(0.99), Some(0.02), Some(0.6)];
        assert_eq!(select_by_estimates(&v, 0.05), vec![0, 1]);
        assert!(select_by_estimates(&[Some(0.5); 4], 0.49).is_empty());
        assert_eq!(select_by_estimates(&v, 0.4999), vec![0, 1, 2]);
        assert!(select_by_estimates(&[None], 0.49).is_empty());
    }

    #[test]
    fn identity_operator_keeps_points() {
        let m_init = one_d(&[-1.0, 1.0], &[0, 1], 0.5);
        let xu = Matrix::from_vec(3, 1, vec![-1.2, 0.9, 7.0]).unwrap();
        let sel = select_high_confidence(&m_init, &xu, 0.1);
        assert_eq!(sel, vec![0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let high = augment_and_pseudolabel(&xu, &sel, &m_init, AugmentOperator::Identity, &mut rng);
        assert_eq!(high.x.as_slice(), &[-1.2, 0.9]);
        assert_eq!(high.labels, vec![0, 1]);
    }

    #[test]
    fn empty_union_is_rejected() {
        let empty = HighConfidenceSet {
            x: Matrix::zeros(0, 1),
            labels: vec![],
            sources: vec![],
        };
        assert!(train_ssl(&Matrix::zeros(0, 1), &[], &empty, 0.3).is_err());
        assert!(KernelClassifier::new(Matrix::zeros(1, 1), vec![2], 0.3).is_err());
        assert!(KernelClassifier::new(Matrix::zeros(1, 1), vec![1], 0.0).is_err());
    }

    #[test]
    fn default_exponents() {
        let m = MarginParams::default();
        assert!((m.ssl_rate(1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.ssl_bandwidth_exponent(1) - 1.0 / 6.0).abs() < 1e-15);
        assert!((m.labeled_bandwidth_exponent(1) - 0.2).abs() < 1e-15);
        assert!((m.zeta_threshold(1) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn median_and_slope() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(ls_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]), Some(2.0));
        assert_eq!(ls_slope(&[1.0], &[1.0]), None);
    }
}
