//! Datasets, synthetic generation, the server/client split and client partitioners.

mod idx;
mod partition;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageShape, Matrix};

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use partition::{partition, PartitionMode, PartitionSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: malformed IDX data at byte offset {offset}: {reason}")]
    Format {
        path: String,
        offset: usize,
        reason: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("partition infeasible: {0}")]
    Partition(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Layout of one sample row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleShape {
    Vector(usize),
    Image(ImageShape),
}

impl SampleShape {
    pub fn len(&self) -> usize {
        match self {
            SampleShape::Vector(d) => *d,
            SampleShape::Image(img) => img.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Features with class labels. Labels are stored as class indices; `one_hot`
/// gives the matrix form.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    x: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    shape: SampleShape,
    class_names: Option<Vec<String>>,
}

impl LabeledDataset {
    pub fn new(
        x: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        shape: SampleShape,
    ) -> Result<Self, DataError> {
        if x.rows() == 0 {
            return Err(DataError::Config("dataset must have at least one row".into()));
        }
        if x.rows() != labels.len() {
            return Err(DataError::Config(format!(
                "{} feature rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if x.cols() != shape.len() {
            return Err(DataError::Config(format!(
                "{} features per row but sample shape holds {}",
                x.cols(),
                shape.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !x.is_finite() {
            return Err(DataError::Config("features contain NaN or infinity".into()));
        }
        Ok(LabeledDataset {
            x,
            labels,
            num_classes,
            shape,
            class_names: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> SampleShape {
        self.shape
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Matrix {
        one_hot(&self.labels, self.num_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: self.x.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            shape: self.shape,
            class_names: self.class_names.clone(),
        }
    }

    /// Seeded shuffle, then the first `n_test` rows become the test split.
    pub fn train_test_split(&self, n_test: usize, seed: u64) -> Result<(Self, Self), DataError> {
        if n_test == 0 || n_test >= self.len() {
            return Err(DataError::Config(format!(
                "test split of {n_test} rows from {} is not possible",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (test, train) = order.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut y = Matrix::zeros(labels.len(), num_classes);
    for (r, &c) in labels.iter().enumerate() {
        y.row_mut(r)[c] = 1.0;
    }
    y
}

/// Ground-truth labels of a client shard. Not readable outside this module;
/// only aggregate pseudo-label scores leave it.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLabels(Vec<usize>);

/// Counts from comparing pseudo-labels with a shard's hidden labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelScore {
    /// Shard rows considered.
    pub seen: usize,
    /// Rows that received a pseudo-label.
    pub kept: usize,
    /// Kept rows whose pseudo-label matches the hidden label.
    pub correct: usize,
}

impl PseudoLabelScore {
    pub fn merge(self, other: PseudoLabelScore) -> PseudoLabelScore {
        PseudoLabelScore {
            seen: self.seen + other.seen,
            kept: self.kept + other.kept,
            correct: self.correct + other.correct,
        }
    }

    pub fn quantity(&self) -> Option<f64> {
        (self.seen > 0).then(|| self.kept as f64 / self.seen as f64)
    }

    pub fn quality(&self) -> Option<f64> {
        (self.kept > 0).then(|| self.correct as f64 / self.kept as f64)
    }
}

/// Unlabeled data held by one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    client_id: usize,
    x: Matrix,
    shape: SampleShape,
    hidden: HiddenLabels,
    source_indices: Vec<usize>,
}

impl ClientShard {
    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn shape(&self) -> SampleShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Indices of this shard's rows in the dataset it was split from.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    /// Scores `(row, pseudo_class)` pairs against the hidden labels.
    /// `seen` is the number of shard rows the labels were generated over.
    pub fn score_pseudo_labels(&self, seen: usize, labeled: &[(usize, usize)]) -> PseudoLabelScore {
        let correct = labeled
            .iter()
            .filter(|(row, class)| self.hidden.0.get(*row) == Some(class))
            .count();
        PseudoLabelScore {
            seen,
            kept: labeled.len(),
            correct,
        }
    }

    /// Number of distinct hidden labels, for partition diagnostics.
    pub fn distinct_label_count(&self) -> usize {
        let mut labels = self.hidden.0.clone();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }

    /// Per-class row counts, for partition diagnostics.
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in &self.hidden.0 {
            counts[y] += 1;
        }
        counts
    }
}

/// Disjoint server and client views of one dataset.
#[derive(Clone, Debug)]
pub struct FederatedSplit {
    pub server: LabeledDataset,
    pub server_indices: Vec<usize>,
    pub shards: Vec<ClientShard>,
}

impl FederatedSplit {
    /// JSON manifest `{ "server": [...], "clients": { "<id>": [...] } }`.
    pub fn manifest(&self) -> serde_json::Value {
        let clients: serde_json::Map<String, serde_json::Value> = self
            .shards
            .iter()
            .map(|s| (s.client_id.to_string(), serde_json::json!(s.source_indices)))
            .collect();
        serde_json::json!({ "server": self.server_indices, "clients": clients })
    }
}

/// `K` Gaussian clusters with unit covariance and adjacent means `separation` apart.
///
/// Labels are assigned round-robin, so class counts differ by at most one.
/// With `d >= K` the means sit on scaled coordinate axes (all pairs equidistant);
/// otherwise they are spaced along the first axis.
pub fn synth_blobs(
    n: usize,
    d: usize,
    num_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if num_classes < 2 || n < num_classes || d == 0 {
        return Err(DataError::Config(format!(
            "blobs need n >= K >= 2 and d >= 1 (n={n}, K={num_classes}, d={d})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    for &k in &labels {
        for j in 0..d {
            let mean = if d >= num_classes {
                if j == k {
                    separation / std::f64::consts::SQRT_2
                } else {
                    0.0
                }
            } else if j == 0 {
                k as f64 * separation
            } else {
                0.0
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + z);
        }
    }
    LabeledDataset::new(
        Matrix::from_vec(n, d, data).expect("sized above"),
        labels,
        num_classes,
        SampleShape::Vector(d),
    )
}

/// Reads a CSV file with a header row. `label_column` names the class column;
/// every other column is a numeric feature. Integer labels are used as class
/// indices; any other labels are mapped to indices in sorted order.
pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledDataset, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .clone();
    let label_pos = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::Csv(format!("no column named `{label_column}`")))?;
    let mut raw_labels = Vec::new();
    let mut features = Vec::new();
    let mut d = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let mut row = Vec::with_capacity(record.len().saturating_sub(1));
        for (j, field) in record.iter().enumerate() {
            if j == label_pos {
                raw_labels.push(field.trim().to_string());
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    DataError::Csv(format!("row {}: `{field}` is not numeric", line + 2))
                })?;
                row.push(v);
            }
        }
        d = row.len();
        features.extend(row);
    }
    let n = raw_labels.len();
    let (labels, names) = if raw_labels.iter().all(|l| l.parse::<usize>().is_ok()) {
        let labels: Vec<usize> = raw_labels.iter().map(|l| l.parse().unwrap()).collect();
        (labels, None)
    } else {
        let mut names = raw_labels.clone();
        names.sort();
        names.dedup();
        let labels = raw_labels
            .iter()
            .map(|l| names.binary_search(l).unwrap())
            .collect();
        (labels, Some(names))
    };
    let num_classes = labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    let x = Matrix::from_vec(n, d, features).map_err(|e| DataError::Csv(e.to_string()))?;
    let ds = LabeledDataset::new(x, labels, num_classes, SampleShape::Vector(d))?;
    Ok(match names {
        Some(names) => ds.with_class_names(names),
        None => ds,
    })
}

/// Stratified labeled server split plus a client partition of the remainder.
///
/// The server receives `server_size / K` samples of each class, with the
/// remainder spread one per class over a seeded class order. Everything else
/// is partitioned across clients by `spec`.
pub fn split_server_clients(
    ds: &LabeledDataset,
    server_size: usize,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<FederatedSplit, DataError> {
    let k = ds.num_classes();
    if server_size < k {
        return Err(DataError::Config(format!(
            "server split of {server_size} cannot hold one sample of each of {k} classes"
        )));
    }
    if server_size >= ds.len() {
        return Err(DataError::Config(format!(
            "server split of {server_size} leaves no client data out of {}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in ds.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut class_order: Vec<usize> = (0..k).collect();
    class_order.shuffle(&mut rng);
    let mut quota = vec![server_size / k; k];
    for &c in class_order.iter().take(server_size % k) {
        quota[c] += 1;
    }
    let mut server_indices = Vec::with_capacity(server_size);
    let mut rest = Vec::with_capacity(ds.len() - server_size);
    for (c, pool) in pools.iter().enumerate() {
        if pool.len() < quota[c] {
            return Err(DataError::Config(format!(
                "class {c} has {} samples, fewer than its server quota {}",
                pool.len(),
                quota[c]
            )));
        }
        server_indices.extend_from_slice(&pool[..quota[c]]);
        rest.extend_from_slice(&pool[quota[c]..]);
    }
    server_indices.sort_unstable();
    rest.sort_unstable();

    let groups = partition(&rest, ds.labels(), k, spec)?;
    let shards = groups
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| ClientShard {
            client_id,
            x: ds.x().select_rows(&idx),
            shape: ds.shape(),
            hidden: HiddenLabels(idx.iter().map(|&i| ds.labels()[i]).collect()),
            source_indices: idx,
        })
        .collect();
    Ok(FederatedSplit {
        server: ds.subset(&server_indices),
        server_indices,
        shards,
    })
}
