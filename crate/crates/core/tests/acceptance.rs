//! One line per acceptance criterion, with the measured values.
//!
//! `cargo test --release --test acceptance -- --nocapture`

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semifl::augment::AugmentPolicy;
use semifl::data::{partition, split_server_clients, synth_blobs, PartitionSpec};
use semifl::harness::{load_config, run};
use semifl::model::{
    argmax, pool_layer, sgd_step, ImageShape, LayerContribution, Matrix, ModelConfig, Moments,
    MomentumState, Network, NormSource, ParamEntry, ParamSet,
};
use semifl::protocol::*;
use semifl::theory::{rate_experiment, SyntheticTask, TheoryConfig};

fn report(criterion: u8, pass: bool, detail: impl AsRef<str>) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {status} {}", detail.as_ref());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn random_set(rng: &mut ChaCha8Rng, sizes: &[usize]) -> ParamSet {
    let entries = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut e = ParamEntry::zeros(format!("p{i}"), vec![n]);
            e.values.iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
            e
        })
        .collect();
    ParamSet::new(entries).unwrap()
}

/// Two-pass mean and `n - 1` variance of one column.
fn column_oracle(x: &Matrix, col: usize) -> (f64, f64) {
    let vals: Vec<f64> = x.iter_rows().map(|r| r[col]).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

#[test]
fn criterion_1_oracle_algebra() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut agg_err: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(1..16);
        let sets: Vec<ParamSet> = (0..k).map(|_| random_set(&mut rng, &[7, 3, 12])).collect();
        let refs: Vec<&ParamSet> = sets.iter().collect();
        let agg = aggregate(&refs).unwrap().unwrap();
        for (i, v) in agg.flat().enumerate() {
            let mean = sets.iter().map(|s| s.flat().nth(i).unwrap()).sum::<f64>() / k as f64;
            agg_err = agg_err.max((v - mean).abs());
        }
    }

    let part = |vals: &[f64]| {
        let x = Matrix::from_vec(vals.len(), 1, vals.to_vec()).unwrap();
        LayerContribution::from(&Moments::of_channels(&x, 1))
    };
    let fixture = pool_layer(&[part(&[0.0, 2.0]), part(&[4.0, 6.0])]).unwrap();
    let fixture_err = (fixture.var[0] - 20.0 / 3.0).abs();

    let mut pool_err: f64 = 0.0;
    for _ in 0..50 {
        let channels = rng.random_range(1..5);
        let participants = rng.random_range(1..7);
        let mut parts = Vec::new();
        let mut rows = Vec::new();
        for p in 0..participants {
            // at least two rows overall; single-row participants are allowed
            let n = rng.random_range(if p == 0 { 2 } else { 1 }..25);
            let offset = rng.random_range(-10.0..10.0);
            let block: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..channels).map(|_| offset + rng.random_range(-3.0..3.0)).collect())
                .collect();
            let m = Matrix::from_rows(&block).unwrap();
            parts.push(LayerContribution::from(&Moments::of_channels(&m, channels)));
            rows.extend(block);
        }
        let concat = Matrix::from_rows(&rows).unwrap();
        let pooled = pool_layer(&parts).unwrap();
        for c in 0..channels {
            let (mean, var) = column_oracle(&concat, c);
            pool_err = pool_err.max((pooled.mean[c] - mean).abs()).max((pooled.var[c] - var).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = agg_err <= 1e-12 && fixture_err <= 1e-12 && pool_err <= 1e-9 && secs < 1.0;
    report(
        1,
        pass,
        format!(
            "aggregate max err {agg_err:.1e}, fixture var {:.15} (err {fixture_err:.1e}), \
             concat max err {pool_err:.1e}, {secs:.3}s",
            fixture.var[0]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_checks() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..10u64 {
        let cfg = if case % 3 == 2 {
            let img = ImageShape {
                height: 4,
                width: 4,
                channels: rng.random_range(1..3),
            };
            ModelConfig::cnn(img, vec![2, 3], rng.random_range(2..5))
        } else {
            let hidden = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..6)).collect();
            ModelConfig::mlp(rng.random_range(2..6), hidden, rng.random_range(2..5))
        };
        let net = Network::new(cfg.clone()).unwrap();
        let params = net.init_params(case + 100);
        let rows = rng.random_range(3..7);
        let x = Matrix::from_vec(
            rows,
            cfg.input_dim,
            (0..rows * cfg.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let mut t = Matrix::zeros(rows, cfg.num_classes);
        for r in 0..rows {
            let lam: f64 = rng.random();
            t.row_mut(r)[rng.random_range(0..cfg.num_classes)] += lam;
            t.row_mut(r)[rng.random_range(0..cfg.num_classes)] += 1.0 - lam;
        }
        let (_, grad) = net.loss_and_grad(&params, &x, &t, NormSource::Batch).unwrap();
        let h = 1e-6;
        let mut probe = params.clone();
        for (i, ana) in grad.flat().enumerate() {
            let orig = probe.flat().nth(i).unwrap();
            *probe.flat_mut().nth(i).unwrap() = orig + h;
            let lp = net.loss_and_grad(&probe, &x, &t, NormSource::Batch).unwrap().0;
            *probe.flat_mut().nth(i).unwrap() = orig - h;
            let lm = net.loss_and_grad(&probe, &x, &t, NormSource::Batch).unwrap().0;
            *probe.flat_mut().nth(i).unwrap() = orig;
            let num = (lp - lm) / (2.0 * h);
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 30.0;
    report(2, pass, format!("10 configurations, max relative error {worst:.2e}, {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_3_protocol_degeneracy() {
    let started = Instant::now();
    let seed = 11;
    let ds = synth_blobs(400, 6, 3, 3.0, seed).unwrap();
    let (train, test) = ds.train_test_split(100, seed).unwrap();
    let split = split_server_clients(&train, 30, &PartitionSpec::iid(1, seed), seed).unwrap();
    let net = Network::new(ModelConfig::mlp(6, vec![8], 3)).unwrap();
    let identity = AugmentPolicy::identity();
    let fed = Federation {
        network: &net,
        server: &split.server,
        shards: &split.shards,
        test: &test,
        augment: &identity,
    };
    let cfg = ProtocolConfig {
        rounds: 1,
        local_epochs: 1,
        activity_rate: 1.0,
        loss_weight: 0.0,
        threshold: 0.0,
        global_momentum: 0.0,
        scheduler: Scheduler::Constant,
        ..Default::default()
    };
    let init = net.init_params(3);
    let out = run_semifl(&fed, &cfg, init.clone(), seed, |_| {}).unwrap();

    // centralized: fine-tune, label the shard, one plain SGD epoch, fine-tune
    let server = &split.server;
    let train_cfg = cfg.server_training(cfg.lr);
    let (tuned, _) = server_update(
        &net, &init, server.x(), &server.one_hot(), server.shape(), &identity.weak, train_cfg,
        &StreamKey::new(seed, 1, SERVER_ID),
    )
    .unwrap();
    let sbn = refresh_sbn(&net, &tuned, SbnVariant::ServerOnly, server.x(), None).unwrap();
    let shard = &split.shards[0];
    let probs = net.forward(&tuned, NormSource::Global(&sbn), shard.features()).unwrap();
    let mut targets = Matrix::zeros(shard.len(), 3);
    for (r, p) in probs.iter_rows().enumerate() {
        targets.row_mut(r)[argmax(p)] = 1.0;
    }
    let key = StreamKey::new(seed, 1, 0);
    let mut w = tuned.clone();
    let mut state = MomentumState::zeros_like(&w);
    let mut shuffle = key.rng(stream::SHUFFLE_FIX);
    for rows in epoch_batches(shard.len(), cfg.client_batch, &mut shuffle) {
        let xb = shard.features().select_rows(&rows);
        let yb = targets.select_rows(&rows);
        let (_, grad) = net.loss_and_grad(&w, &xb, &yb, NormSource::Batch).unwrap();
        sgd_step(&mut w, &grad, &mut state, train_cfg.sgd).unwrap();
    }
    let (expected, _) = server_update(
        &net, &w, server.x(), &server.one_hot(), server.shape(), &identity.weak, train_cfg,
        &StreamKey::new(seed, 2, SERVER_ID),
    )
    .unwrap();
    let mismatched = out
        .params
        .flat()
        .zip(expected.flat())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    let secs = started.elapsed().as_secs_f64();
    let pass = mismatched == 0 && out.records[0].participating == 1 && secs < 10.0;
    report(
        3,
        pass,
        format!("{mismatched} of {} parameters differ bitwise, {secs:.2}s", expected.len()),
    );
    assert!(pass);
}

fn max_share(group: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    group.iter().for_each(|&i| counts[labels[i]] += 1);
    *counts.iter().max().unwrap() as f64 / group.len().max(1) as f64
}

#[test]
fn criterion_4_partition_invariants() {
    let started = Instant::now();
    let k = 10;
    let mut iid_spread = 0;
    let mut kclass_ok = 0;
    let mut worst_gap: f64 = 0.0;
    let mut skew_wins = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(500..3000);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let idx: Vec<usize> = (0..n).collect();
        let groups = partition(&idx, &labels, k, &PartitionSpec::iid(37, seed)).unwrap();
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        iid_spread = iid_spread.max(sizes.iter().max().unwrap() - sizes.iter().min().unwrap());

        // 100 per class, 20 clients, each class held by 4 clients
        let labels: Vec<usize> = (0..1000).map(|i| i % k).collect();
        let idx: Vec<usize> = (0..1000).collect();
        let groups = partition(&idx, &labels, k, &PartitionSpec::k_class(2, 20, seed)).unwrap();
        let ok = groups.iter().all(|g| {
            let mut counts = vec![0usize; k];
            g.iter().for_each(|&i| counts[labels[i]] += 1);
            let present: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
            present.len() <= 2 && present.windows(2).all(|w| w[0] == w[1])
        });
        kclass_ok += ok as usize;

        let labels: Vec<usize> = (0..20_000).map(|i| i % k).collect();
        let idx: Vec<usize> = (0..20_000).collect();
        let groups = partition(&idx, &labels, k, &PartitionSpec::dirichlet(1e6, 20, seed)).unwrap();
        let shares: Vec<f64> = groups.iter().map(|g| max_share(g, &labels, k)).collect();
        worst_gap = worst_gap.max((median(shares) - 0.1).abs());

        let labels: Vec<usize> = (0..5_000).map(|i| i % k).collect();
        let idx: Vec<usize> = (0..5_000).collect();
        let skew = |alpha: f64| {
            let groups = partition(&idx, &labels, k, &PartitionSpec::dirichlet(alpha, 50, seed)).unwrap();
            groups.iter().map(|g| max_share(g, &labels, k)).sum::<f64>() / groups.len() as f64
        };
        skew_wins += (skew(0.1) > skew(0.3)) as usize;
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = iid_spread <= 1 && kclass_ok == 100 && worst_gap <= 0.02 && skew_wins >= 90 && secs < 30.0;
    report(
        4,
        pass,
        format!(
            "iid size spread {iid_spread}, k_class ok {kclass_ok}/100, \
             dirichlet(1e6) worst median share gap {worst_gap:.4}, \
             skew(0.1) > skew(0.3) in {skew_wins}/100, {secs:.1}s"
        ),
    );
    assert!(pass);
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

struct Arm {
    final_accuracy: f64,
    first_quality: Option<f64>,
    last_quality: Option<f64>,
    records: Vec<u8>,
}

fn run_arm(overrides: &[(&str, &str)], seed: u64, out: &Path) -> Arm {
    let mut o: Vec<(String, String)> = overrides
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    o.push(("master_seed".into(), seed.to_string()));
    let cfg = load_config(&config_path("desk.toml"), &o).unwrap();
    let summary = run(&cfg, Some(out)).unwrap();
    let records = fs::read(&summary.records_path).unwrap();
    let quality: Vec<Option<f64>> = String::from_utf8_lossy(&records)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["pseudo_quality"].as_f64())
        .collect();
    Arm {
        final_accuracy: summary.final_accuracy.unwrap(),
        first_quality: quality.first().copied().flatten(),
        last_quality: quality.last().copied().flatten(),
        records,
    }
}

struct Desk {
    /// Arm name and its per-seed runs, in the order of `DESK_ARMS`.
    arms: Vec<(&'static str, Vec<Arm>)>,
    secs: f64,
    _dir: tempfile::TempDir,
}

const DESK_SEEDS: [u64; 3] = [0, 1, 2];

const DESK_ARMS: [(&str, &[(&str, &str)]); 6] = [
    ("semifl", &[]),
    ("partial", &[("baseline", "\"partially_supervised\"")]),
    ("vanilla", &[("baseline", "\"vanilla_parallel\"")]),
    ("ft_only", &[("protocol.pseudo_on_receipt", "false")]),
    ("pl_only", &[("protocol.fine_tune_labeled", "false")]),
    ("pooled_sbn", &[("protocol.sbn_variant", "\"server_and_clients\"")]),
];

/// Criteria 5, 6 and 8 share one set of desk-scale runs.
fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let arms = DESK_ARMS
            .iter()
            .map(|(name, overrides)| {
                let runs: Vec<Arm> = DESK_SEEDS
                    .iter()
                    .map(|&s| run_arm(overrides, s, &dir.path().join(format!("{name}-{s}"))))
                    .collect();
                println!(
                    "  {name:10} final accuracy {:?}",
                    runs.iter().map(|a| (a.final_accuracy * 1e4).round() / 1e4).collect::<Vec<_>>()
                );
                (*name, runs)
            })
            .collect();
        Desk {
            arms,
            secs: started.elapsed().as_secs_f64(),
            _dir: dir,
        }
    })
}

impl Desk {
    fn runs(&self, name: &str) -> &[Arm] {
        &self.arms.iter().find(|(n, _)| *n == name).unwrap().1
    }

    fn median_accuracy(&self, name: &str) -> f64 {
        median(self.runs(name).iter().map(|a| a.final_accuracy).collect())
    }
}

#[test]
fn criterion_5_desk_scale_benefit() {
    let desk = desk();
    let acc = |n: &str| desk.median_accuracy(n);
    let (semifl, partial, vanilla, ft_only, pl_only) =
        (acc("semifl"), acc("partial"), acc("vanilla"), acc("ft_only"), acc("pl_only"));
    let semifl_runs = desk.runs("semifl");
    let q1 = median(semifl_runs.iter().map(|a| a.first_quality.unwrap_or(f64::NAN)).collect());
    let qt = median(semifl_runs.iter().map(|a| a.last_quality.unwrap_or(f64::NAN)).collect());

    let a = semifl >= partial + 0.05;
    let b = vanilla <= semifl - 0.05;
    let vanilla_worst = vanilla < ft_only.min(pl_only).min(semifl);
    let both_best = semifl > ft_only.max(pl_only);
    let d = qt > q1;
    let pass = a && b && vanilla_worst && both_best && d && desk.secs < 900.0;
    let yn = |x: bool| if x { "ok" } else { "FAILED" };
    report(
        5,
        pass,
        format!(
            "medians semifl {semifl:.4} partial {partial:.4} vanilla {vanilla:.4} ft_only {ft_only:.4} \
             pl_only {pl_only:.4}; (a) {} (b) {} (c) vanilla worst {} both toggles best {} \
             (d) quality {q1:.4} -> {qt:.4} {}; {:.0}s",
            yn(a),
            yn(b),
            yn(vanilla_worst),
            yn(both_best),
            yn(d),
            desk.secs
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_sbn_variants() {
    let desk = desk();
    let (server_only, pooled) = (desk.median_accuracy("semifl"), desk.median_accuracy("pooled_sbn"));
    let gap = (server_only - pooled).abs();
    let pass = gap <= 0.02;
    report(
        6,
        pass,
        format!(
            "server_only {server_only:.4} server_and_clients {pooled:.4}, gap {:.2} points",
            gap * 100.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism() {
    let first = &desk().runs("semifl")[0];
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let again = run_arm(DESK_ARMS[0].1, DESK_SEEDS[0], dir.path());
    let secs = started.elapsed().as_secs_f64();
    let identical = again.records == first.records;
    let pass = identical && secs < 1.0;
    report(
        8,
        pass,
        format!(
            "records byte-identical: {identical} ({} bytes), rerun took {secs:.2}s (budget 1s)",
            again.records.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_theory_rates() {
    let started = Instant::now();
    let cfg = TheoryConfig::default();
    let table = rate_experiment(&SyntheticTask::default(), &cfg, &[0, 1, 2, 3, 4]).unwrap();
    let inversions: Vec<_> = table
        .summary
        .windows(2)
        .filter(|w| w[1].median_ssl > w[0].median_ssl)
        .collect();
    let within_se = inversions
        .iter()
        .all(|w| w[1].median_ssl - w[0].median_ssl <= w[1].se_ssl.max(w[0].se_ssl));
    let last = table.summary.last().unwrap();
    let slope = table.slope_fit.unwrap_or(f64::NAN);
    let secs = started.elapsed().as_secs_f64();
    let pass = inversions.len() <= 1
        && within_se
        && last.median_ssl < last.median_labeled
        && slope < 0.0
        && secs < 300.0;
    let ssl: Vec<String> = table.summary.iter().map(|s| format!("{:.5}", s.median_ssl)).collect();
    report(
        7,
        pass,
        format!(
            "median ssl risk [{}], {} inversion(s); at n_u={} ssl {:.5} vs labeled-only {:.5}; \
             slope {slope:.3}; {secs:.1}s",
            ssl.join(", "),
            inversions.len(),
            last.n_u,
            last.median_ssl,
            last.median_labeled
        ),
    );
    assert!(pass);
}
