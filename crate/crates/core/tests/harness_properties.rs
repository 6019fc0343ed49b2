use std::fs;
use std::time::Instant;

use sha2::{Digest, Sha256};
use semifl::baselines::BaselineKind;
use semifl::harness::*;
use semifl::protocol::{ProtocolConfig, Scheduler, SbnVariant};

const SMOKE: &str = r#"
run_name = "smoke"
master_seed = 3

[dataset]
kind = "synth_blobs"
n = 1200
dim = 8
classes = 4
separation = 3.0

[split]
test_size = 200
server_size = 40

[partition]
mode = "iid"
num_clients = 8

[model]
hidden = [16]

[protocol]
rounds = 1
local_epochs = 1
activity_rate = 0.25
"#;

#[test]
fn empty_config_uses_the_reference_hyperparameters() {
    let cfg = parse_config("", &[]).unwrap();
    let p = &cfg.protocol;
    assert_eq!(p.rounds, 800);
    assert_eq!(p.lr, 3.0e-2);
    assert_eq!(p.weight_decay, 5.0e-4);
    assert_eq!(p.local_momentum, 0.9);
    assert!(p.nesterov);
    assert_eq!(p.local_epochs, 5);
    assert_eq!(p.server_batch, 10);
    assert_eq!(p.client_batch, 10);
    assert_eq!(p.global_momentum, 0.5);
    assert_eq!(p.threshold, 0.95);
    assert_eq!(p.mixup_a, 0.75);
    assert_eq!(p.loss_weight, 1.0);
    assert_eq!(p.activity_rate, 0.1);
    assert_eq!(p.scheduler, Scheduler::Cosine);
    assert_eq!(p.sbn_variant, SbnVariant::ServerOnly);
    assert_eq!(*p, ProtocolConfig::default());
    assert_eq!(cfg.baseline, None);
    assert_eq!(cfg.mode, Mode::Federated);
}

#[test]
fn range_and_key_errors_are_named() {
    let err = parse_config("[protocol]\nthreshold = 1.5\n", &[]).unwrap_err().to_string();
    assert!(err.contains("threshold"), "{err}");
    let err = parse_config("[protocol]\nthresold = 0.5\n", &[]).unwrap_err().to_string();
    assert!(err.contains("thresold"), "{err}");
    let err = parse_config("colour = 1\n", &[]).unwrap_err().to_string();
    assert!(err.contains("colour"), "{err}");
    let err = parse_config("[dataset]\nkind = \"synth_blobs\"\nn = 10\ndim = 2\nclasses = 2\nseparation = 1.0\nextra = 2\n", &[])
        .unwrap_err()
        .to_string();
    assert!(err.contains("extra"), "{err}");
    assert!(parse_config("run_name = \"../x\"\n", &[]).is_err());
}

#[test]
fn overrides_win_over_the_file() {
    let text = "master_seed = 1\n[protocol]\nrounds = 5\nfine_tune_labeled = true\n";
    let cfg = parse_config(
        text,
        &[
            ("protocol.rounds".into(), "7".into()),
            toggle_override("fine_tune=false").unwrap(),
            toggle_override("pseudo_on_receipt=false").unwrap(),
            ("master_seed".into(), "9".into()),
            ("baseline".into(), "\"vanilla_parallel\"".into()),
            ("run_name".into(), "bare-word".into()),
        ],
    )
    .unwrap();
    assert_eq!(cfg.protocol.rounds, 7);
    assert!(!cfg.protocol.fine_tune_labeled);
    assert!(!cfg.protocol.pseudo_on_receipt);
    assert_eq!(cfg.master_seed, 9);
    assert_eq!(cfg.baseline, Some(BaselineKind::VanillaParallel));
    assert_eq!(cfg.run_name, "bare-word");
    assert!(toggle_override("fine_tune=maybe").is_err());
    assert!(toggle_override("sbn=true").is_err());
    assert!(split_assignment("novalue").is_err());
}

#[test]
fn hash_is_sha256_of_canonical_json() {
    let a = parse_config(SMOKE, &[]).unwrap();
    let b = parse_config(SMOKE, &[]).unwrap();
    assert_eq!(a.hash(), b.hash());
    let json = serde_json::to_string(&a).unwrap();
    let expected: String = Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(a.hash(), expected);
    let c = parse_config(SMOKE, &[("protocol.rounds".into(), "2".into())]).unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn smoke_run_writes_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(SMOKE, &[]).unwrap();
    let out = tmp.path().join("nested/does/not/exist");
    let started = Instant::now();
    let first = run(&cfg, Some(&out)).unwrap();
    assert!(started.elapsed().as_secs() < 60);
    for f in ["records.jsonl", "summary.csv", "checkpoint.json", "config.json", "split.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let records = fs::read(out.join("records.jsonl")).unwrap();
    assert_eq!(String::from_utf8_lossy(&records).lines().count(), 1);
    let again = tmp.path().join("again");
    let second = run(&cfg, Some(&again)).unwrap();
    assert_eq!(records, fs::read(again.join("records.jsonl")).unwrap());
    assert_eq!(first.final_accuracy, second.final_accuracy);
    assert_eq!(first.config_hash, second.config_hash);
    assert!(first.best_accuracy >= first.final_accuracy);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("run_name,mode,arm,master_seed,final_accuracy"));

    let plots = emit_plot_data(&out.join("records.jsonl"), &tmp.path().join("plots")).unwrap();
    let acc = fs::read_to_string(plots.accuracy).unwrap();
    assert_eq!(acc.lines().count(), 2);
    assert_eq!(fs::read_to_string(plots.risk).unwrap().lines().count(), 1);
}

#[test]
fn baselines_run_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    for b in ["fully_supervised", "partially_supervised", "vanilla_parallel"] {
        let cfg = parse_config(SMOKE, &[("baseline".into(), format!("\"{b}\""))]).unwrap();
        let s = run(&cfg, Some(&tmp.path().join(b))).unwrap();
        assert_eq!(s.arm, b);
        assert!(s.final_accuracy.is_some());
    }
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(SMOKE, &[("run_name".into(), "env-root".into())]).unwrap();
    std::env::set_var(OUT_ROOT_ENV, tmp.path());
    let dir = cfg.run_dir(None);
    std::env::remove_var(OUT_ROOT_ENV);
    assert_eq!(dir, tmp.path().join("env-root"));
    assert_eq!(cfg.run_dir(None), std::path::Path::new("runs").join("env-root"));
}

#[test]
fn theory_mode_writes_rate_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "mode = \"theory\"\n[theory]\nseeds = [0, 1]\n[theory.config]\nn_u_grid = [100, 400]\nmc_samples = 300\n";
    let cfg = parse_config(text, &[]).unwrap();
    let s = run(&cfg, Some(tmp.path())).unwrap();
    assert_eq!(s.final_accuracy, None);
    let rate = fs::read_to_string(tmp.path().join("rate.csv")).unwrap();
    assert_eq!(rate.lines().count(), 5);
    let plots = emit_plot_data(&s.records_path, &tmp.path().join("plots")).unwrap();
    let risk = fs::read_to_string(plots.risk).unwrap();
    assert_eq!(risk.lines().next().unwrap(), "n_u,n_la,seed,risk_ssl,risk_labeled,slope_fit");
    assert_eq!(risk.lines().count(), 5);
    assert_eq!(fs::read_to_string(plots.accuracy).unwrap().lines().count(), 1);
}

#[test]
fn plot_data_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let files = emit_plot_data(&empty, &tmp.path().join("e")).unwrap();
    assert_eq!(fs::read_to_string(files.accuracy).unwrap(), "round,test_accuracy,lr\n");
    assert_eq!(fs::read_to_string(files.pseudo).unwrap(), "round,pseudo_quantity,pseudo_quality\n");

    let rec = |round: usize| {
        format!(
            "{{\"round\":{round},\"lr\":0.1,\"sampled\":2,\"participating\":1,\"test_accuracy\":0.5,\
             \"pseudo_quantity\":0.2,\"pseudo_quality\":null,\"server_loss\":1.0,\"client_loss\":null}}"
        )
    };
    let shuffled = tmp.path().join("shuffled.jsonl");
    fs::write(&shuffled, format!("{}\n{}\n\n{}\n", rec(3), rec(1), rec(2))).unwrap();
    let files = emit_plot_data(&shuffled, &tmp.path().join("s")).unwrap();
    let rounds: Vec<String> = fs::read_to_string(files.pseudo)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.to_string())
        .collect();
    assert_eq!(rounds, vec!["1,0.2,", "2,0.2,", "3,0.2,"]);

    let broken = tmp.path().join("broken.jsonl");
    fs::write(&broken, format!("{}\n{{\"round\": oops}}\n", rec(1))).unwrap();
    let err = emit_plot_data(&broken, &tmp.path().join("b")).unwrap_err();
    assert!(matches!(err, HarnessError::Records { line: 2, .. }), "{err}");
    assert!(err.to_string().contains(":2:"));
}
