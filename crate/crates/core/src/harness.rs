//! Experiment plumbing: TOML configs with dotted overrides, run dispatch,
//! per-round JSONL records, summaries, checkpoints and plot-ready CSV series.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, LineWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AugmentError, AugmentPolicy};
use crate::baselines::{
    run_fully_supervised, run_parallel_vanilla, run_partially_supervised, BaselineKind,
};
use crate::data::{
    load_csv, load_idx, split_server_clients, synth_blobs, DataError, LabeledDataset,
    PartitionSpec, SampleShape,
};
use crate::model::{Activation, Checkpoint, ModelConfig, ModelError, Network};
use crate::protocol::{run_semifl, Federation, ProtocolConfig, ProtocolError, RoundRecord, RunOutcome};
use crate::theory::{ls_slope, median, rate_experiment, RateRow, SyntheticTask, TheoryConfig, TheoryError};

/// Environment variable that replaces the configured output root.
pub const OUT_ROOT_ENV: &str = "SEMIFL_OUT_ROOT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("{path}:{line}: {message}")]
    Records {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Federated,
    Theory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SynthBlobs {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        /// Defaults to the master seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
        /// Keep a seeded random subset of this many samples.
        #[serde(default)]
        limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::SynthBlobs {
            n: 10_000,
            dim: 20,
            classes: 10,
            separation: 3.0,
            seed: None,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, master_seed: u64) -> Result<LabeledDataset, HarnessError> {
        Ok(match self {
            DatasetSpec::SynthBlobs {
                n,
                dim,
                classes,
                separation,
                seed,
            } => synth_blobs(*n, *dim, *classes, *separation, seed.unwrap_or(master_seed))?,
            DatasetSpec::Idx {
                images,
                labels,
                num_classes,
                limit,
            } => {
                let ds = load_idx(images, labels, *num_classes)?;
                match limit {
                    Some(n) if *n < ds.len() => {
                        use rand::seq::index::sample;
                        use rand::SeedableRng;
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master_seed);
                        let mut idx = sample(&mut rng, ds.len(), *n).into_vec();
                        idx.sort_unstable();
                        ds.subset(&idx)
                    }
                    _ => ds,
                }
            }
            DatasetSpec::Csv { path, label_column } => load_csv(path, label_column)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub test_size: usize,
    /// Labeled server samples `N_S`.
    pub server_size: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_size: 2_000,
            server_size: 100,
        }
    }
}

fn default_clients() -> usize {
    100
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSection {
    Iid {
        #[serde(default = "default_clients")]
        num_clients: usize,
    },
    KClass {
        k: usize,
        #[serde(default = "default_clients")]
        num_clients: usize,
    },
    Dirichlet {
        alpha: f64,
        #[serde(default = "default_clients")]
        num_clients: usize,
    },
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection::Iid {
            num_clients: default_clients(),
        }
    }
}

impl PartitionSection {
    pub fn spec(&self, seed: u64) -> PartitionSpec {
        match *self {
            PartitionSection::Iid { num_clients } => PartitionSpec::iid(num_clients, seed),
            PartitionSection::KClass { k, num_clients } => PartitionSpec::k_class(k, num_clients, seed),
            PartitionSection::Dirichlet { alpha, num_clients } => {
                PartitionSpec::dirichlet(alpha, num_clients, seed)
            }
        }
    }
}

/// Architecture knobs; input size and class count come from the dataset, and
/// image datasets get a CNN with `hidden` as channel counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sbn_epsilon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![32],
            activation: Activation::default(),
            sbn_epsilon: 1e-5,
        }
    }
}

impl ModelSection {
    pub fn config(&self, shape: SampleShape, num_classes: usize) -> ModelConfig {
        let mut cfg = match shape {
            SampleShape::Vector(d) => ModelConfig::mlp(d, self.hidden.clone(), num_classes),
            SampleShape::Image(img) => ModelConfig::cnn(img, self.hidden.clone(), num_classes),
        };
        cfg.activation = self.activation;
        cfg.sbn_epsilon = self.sbn_epsilon;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub seeds: Vec<u64>,
    pub task: SyntheticTask,
    pub config: TheoryConfig,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            seeds: (0..5).collect(),
            task: SyntheticTask::default(),
            config: TheoryConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub master_seed: u64,
    pub mode: Mode,
    /// Runs a reference pipeline instead of SemiFL.
    pub baseline: Option<BaselineKind>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub partition: PartitionSection,
    pub model: ModelSection,
    /// Defaults to the standard policy for the dataset's sample layout.
    pub augment: Option<AugmentPolicy>,
    pub protocol: ProtocolConfig,
    pub theory: TheorySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_name: "semifl".into(),
            master_seed: 0,
            mode: Mode::Federated,
            baseline: None,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetSpec::default(),
            split: SplitSpec::default(),
            partition: PartitionSection::default(),
            model: ModelSection::default(),
            augment: None,
            protocol: ProtocolConfig::default(),
            theory: TheorySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.run_name.is_empty()
            || self.run_name.contains(['/', '\\'])
            || self.run_name == "."
            || self.run_name == ".."
        {
            return Err(HarnessError::Config(format!(
                "run_name `{}` must be a plain directory name",
                self.run_name
            )));
        }
        self.protocol.validate()?;
        self.theory.config.validate()?;
        self.theory.task.validate()?;
        if self.mode == Mode::Theory && self.theory.seeds.is_empty() {
            return Err(HarnessError::Config("theory.seeds must not be empty".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(HarnessError::Config("model.hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Directory the run writes into: `cli_out` if given, otherwise
    /// `<root>/<run_name>` where the root comes from [`OUT_ROOT_ENV`] when set.
    pub fn run_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(dir) = cli_out {
            return dir.to_path_buf();
        }
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone());
        root.join(&self.run_name)
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Splits `key=value`.
pub fn split_assignment(s: &str) -> Result<(String, String), HarnessError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(HarnessError::Config(format!("expected key=value, got `{s}`"))),
    }
}

/// Maps a `--toggle` switch onto its dotted config key.
pub fn toggle_override(s: &str) -> Result<(String, String), HarnessError> {
    let (k, v) = split_assignment(s)?;
    let key = match k.as_str() {
        "fine_tune" | "fine_tune_labeled" => "protocol.fine_tune_labeled",
        "pseudo_on_receipt" => "protocol.pseudo_on_receipt",
        other => {
            return Err(HarnessError::Config(format!(
                "unknown toggle `{other}` (expected fine_tune or pseudo_on_receipt)"
            )))
        }
    };
    if v != "true" && v != "false" {
        return Err(HarnessError::Config(format!("toggle {k} needs true or false, got `{v}`")));
    }
    Ok((key.to_string(), v))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), HarnessError> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), override_value(raw));
    Ok(())
}

/// Parses config text, applies `overrides` (dotted keys, later wins) and validates.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig, HarnessError> {
    let mut table: toml::Table = text.parse()?;
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table).try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    parse_config(&text, overrides)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_name: String,
    pub mode: Mode,
    pub arm: String,
    pub master_seed: u64,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub records_path: PathBuf,
    pub wall_clock_secs: f64,
    pub config_hash: String,
}

/// Appends one JSON line per item and flushes it, keeping the first error.
struct JsonlSink {
    out: LineWriter<File>,
    path: PathBuf,
    error: Option<HarnessError>,
}

impl JsonlSink {
    fn create(path: PathBuf) -> Result<Self, HarnessError> {
        let file = File::create(&path).map_err(io_at(&path))?;
        Ok(JsonlSink {
            out: LineWriter::new(file),
            path,
            error: None,
        })
    }

    fn push<T: Serialize>(&mut self, item: &T) {
        if self.error.is_some() {
            return;
        }
        let res = serde_json::to_string(item)
            .map_err(HarnessError::from)
            .and_then(|line| writeln!(self.out, "{line}").map_err(io_at(&self.path)));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    fn finish(mut self) -> Result<(), HarnessError> {
        self.out.flush().map_err(io_at(&self.path))?;
        self.error.map_or(Ok(()), Err)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_at(path))
}

fn write_summary_csv(path: &Path, s: &RunSummary) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "run_name",
        "mode",
        "arm",
        "master_seed",
        "final_accuracy",
        "best_accuracy",
        "records_path",
        "wall_clock_secs",
        "config_hash",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    w.write_record([
        s.run_name.clone(),
        serde_json::to_value(s.mode)?.as_str().unwrap_or_default().to_string(),
        s.arm.clone(),
        s.master_seed.to_string(),
        opt(s.final_accuracy),
        opt(s.best_accuracy),
        s.records_path.display().to_string(),
        format!("{:.3}", s.wall_clock_secs),
        s.config_hash.clone(),
    ])?;
    w.flush().map_err(io_at(path))?;
    Ok(())
}

/// Executes the configured experiment and writes its artifacts into
/// [`ExperimentConfig::run_dir`]: `config.json`, `records.jsonl`,
/// `summary.csv`, plus `checkpoint.json` and `split.json` for federated runs or
/// `rate.csv` for theory runs.
pub fn run(cfg: &ExperimentConfig, cli_out: Option<&Path>) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = cfg.run_dir(cli_out);
    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let hash = cfg.hash();
    write_json(
        &dir.join("config.json"),
        &serde_json::json!({ "config_hash": hash, "config": cfg }),
    )?;
    let records_path = dir.join("records.jsonl");
    let mut sink = JsonlSink::create(records_path.clone())?;

    let (arm, final_accuracy, best_accuracy) = match cfg.mode {
        Mode::Theory => {
            let t = &cfg.theory;
            let table = rate_experiment(&t.task, &t.config, &t.seeds)?;
            table.rows.iter().for_each(|r| sink.push(r));
            let rate = dir.join("rate.csv");
            table.write_csv(File::create(&rate).map_err(io_at(&rate))?)?;
            ("theory".to_string(), None, None)
        }
        Mode::Federated => {
            let outcome = run_federated(cfg, &dir, &mut sink)?;
            let best = outcome
                .records
                .iter()
                .map(|r| r.test_accuracy)
                .chain([outcome.final_accuracy])
                .fold(f64::NEG_INFINITY, f64::max);
            Checkpoint {
                params: outcome.params,
                sbn: outcome.sbn,
            }
            .save(&dir.join("checkpoint.json"))?;
            let arm = cfg
                .baseline
                .map(|b| serde_json::to_value(b).map(|v| v.as_str().unwrap_or_default().to_string()))
                .transpose()?
                .unwrap_or_else(|| "semifl".into());
            (arm, Some(outcome.final_accuracy), Some(best))
        }
    };
    sink.finish()?;
    let summary = RunSummary {
        run_name: cfg.run_name.clone(),
        mode: cfg.mode,
        arm,
        master_seed: cfg.master_seed,
        final_accuracy,
        best_accuracy,
        records_path,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config_hash: hash,
    };
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    Ok(summary)
}

fn run_federated(cfg: &ExperimentConfig, dir: &Path, sink: &mut JsonlSink) -> Result<RunOutcome, HarnessError> {
    let seed = cfg.master_seed;
    let ds = cfg.dataset.load(seed)?;
    let (train, test) = ds.train_test_split(cfg.split.test_size, seed)?;
    let split = split_server_clients(&train, cfg.split.server_size, &cfg.partition.spec(seed), seed)?;
    write_json(&dir.join("split.json"), &split.manifest())?;
    let augment = cfg
        .augment
        .clone()
        .unwrap_or_else(|| AugmentPolicy::default_for(train.shape()));
    augment.validate(train.shape())?;
    let network = Network::new(cfg.model.config(train.shape(), train.num_classes()))?;
    let init = network.init_params(seed);
    let fed = Federation {
        network: &network,
        server: &split.server,
        shards: &split.shards,
        test: &test,
        augment: &augment,
    };
    let p = &cfg.protocol;
    let on_round = |r: &RoundRecord| sink.push(r);
    let outcome = match cfg.baseline {
        None => run_semifl(&fed, p, init, seed, on_round),
        Some(BaselineKind::FullySupervised) => {
            run_fully_supervised(&network, &train, &test, &augment, p, init, seed, on_round)
        }
        Some(BaselineKind::PartiallySupervised) => run_partially_supervised(&fed, p, init, seed, on_round),
        Some(BaselineKind::VanillaParallel) => run_parallel_vanilla(&fed, p, init, seed, on_round),
    }?;
    Ok(outcome)
}

/// Paths of the CSV series written by [`emit_plot_data`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlotFiles {
    pub accuracy: PathBuf,
    pub pseudo: PathBuf,
    pub risk: PathBuf,
}

fn parse_records(path: &Path) -> Result<(Vec<RoundRecord>, Vec<RateRow>), HarnessError> {
    let file = File::open(path).map_err(io_at(path))?;
    let mut rounds = Vec::new();
    let mut rates = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| HarnessError::Records {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if value.get("round").is_some() {
            rounds.push(serde_json::from_value(value).map_err(|e| bad(e.to_string()))?);
        } else if value.get("n_u").is_some() {
            rates.push(serde_json::from_value(value).map_err(|e| bad(e.to_string()))?);
        } else {
            return Err(bad("neither a round record nor a rate row".into()));
        }
    }
    Ok((rounds, rates))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `accuracy.csv` and `pseudo.csv` (by round) and `risk.csv` (rate
/// rows) from a records file; series without data get a header only.
pub fn emit_plot_data(records: &Path, out: &Path) -> Result<PlotFiles, HarnessError> {
    let (mut rounds, rates) = parse_records(records)?;
    rounds.sort_by_key(|r| r.round);
    fs::create_dir_all(out).map_err(io_at(out))?;
    let files = PlotFiles {
        accuracy: out.join("accuracy.csv"),
        pseudo: out.join("pseudo.csv"),
        risk: out.join("risk.csv"),
    };

    let mut w = csv::Writer::from_path(&files.accuracy)?;
    w.write_record(["round", "test_accuracy", "lr"])?;
    for r in &rounds {
        w.write_record([r.round.to_string(), r.test_accuracy.to_string(), r.lr.to_string()])?;
    }
    w.flush().map_err(io_at(&files.accuracy))?;

    let mut w = csv::Writer::from_path(&files.pseudo)?;
    w.write_record(["round", "pseudo_quantity", "pseudo_quality"])?;
    for r in &rounds {
        w.write_record([r.round.to_string(), opt(r.pseudo_quantity), opt(r.pseudo_quality)])?;
    }
    w.flush().map_err(io_at(&files.pseudo))?;

    let mut grid: Vec<usize> = rates.iter().map(|r| r.n_u).collect();
    grid.sort_unstable();
    grid.dedup();
    let (lx, ly): (Vec<f64>, Vec<f64>) = grid
        .iter()
        .filter_map(|&n| {
            let mut v: Vec<f64> = rates.iter().filter(|r| r.n_u == n).map(|r| r.risk_ssl.mean).collect();
            let m = median(&mut v);
            (m > 0.0).then(|| ((n as f64).ln(), m.ln()))
        })
        .unzip();
    let slope = ls_slope(&lx, &ly);
    let mut w = csv::Writer::from_path(&files.risk)?;
    w.write_record(["n_u", "n_la", "seed", "risk_ssl", "risk_labeled", "slope_fit"])?;
    for r in &rates {
        w.write_record([
            r.n_u.to_string(),
            r.n_la.to_string(),
            r.seed.to_string(),
            r.risk_ssl.mean.to_string(),
            r.risk_labeled.mean.to_string(),
            opt(slope),
        ])?;
    }
    w.flush().map_err(io_at(&files.risk))?;
    Ok(files)
}
