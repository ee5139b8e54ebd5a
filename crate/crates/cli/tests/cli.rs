use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use semamil::harness::Metrics;
use semamil::model::{count_flops, count_params, ModelConfig};
use semamil_cli::{load_config, EvalResult, ReorderReport};

const SMALL: [&str; 4] = ["data.n_bags=30", "data.l_min=12", "data.l_max=18", "protocol.n_folds=2"];
const FAST: [&str; 4] = ["train.lr=0.001", "train.epochs=2", "model.k=3", "model.d=8"];

fn semamil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semamil")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_reproducible_and_guards_existing_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let mut args = vec!["gen", "--seed", "4", "--out", path(out)];
        args.extend(SMALL);
        let o = semamil(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("wrote 30 bags"));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 31);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["bags"].as_array().unwrap().len(), 30);

    let o = semamil(&["gen", "--out", path(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));
    let mut args = vec!["gen", "--force", "--out", path(&a)];
    args.extend(SMALL);
    assert!(semamil(&args).status.success());
}

#[test]
fn train_then_eval_reproduces_fold_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let mut args = vec!["gen", "--out", path(&data)];
    args.extend(SMALL);
    assert!(semamil(&args).status.success());

    let mut args = vec!["train", "--data", path(&data), "--out", path(&out)];
    args.extend(SMALL);
    args.extend(FAST);
    let o = semamil(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.json", "metrics.csv", "splits.json", "config.json", "history.json", "fold_00.semm", "fold_01.semm"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics: Metrics = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 2);

    for fold in 0..2 {
        let fold_s = fold.to_string();
        let o = semamil(&[
            "eval",
            "--checkpoint",
            path(&out.join(format!("fold_{fold:02}.semm"))),
            "--data",
            path(&data),
            "--splits",
            path(&out.join("splits.json")),
            "--fold",
            &fold_s,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let r: EvalResult = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(r.acc, metrics.per_fold[fold].acc);
        assert_eq!(r.auc, metrics.per_fold[fold].auc);
    }

    // Checkpoint and config disagree on d.
    let o = semamil(&["eval", "--checkpoint", path(&out.join("fold_00.semm")), "--data", path(&data), "model.d=4"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("d=8") && err.contains("d=4"), "{err}");
}

#[test]
fn missing_manifest_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = semamil(&["train", "--data", path(&missing), "--out", path(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(path(&missing)));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.semm");
    fs::write(&ck, b"XXXXjunk").unwrap();
    let o = semamil(&["eval", "--checkpoint", path(&ck), "--data", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"));
}

#[test]
fn config_errors_are_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"model": {"dd": 3}}"#).unwrap();
    let o = semamil(&["flops", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dd"));
    assert_eq!(semamil(&["flops", "train.lrr=1"]).status.code(), Some(1));
    assert_eq!(semamil(&["flops", "model.d=0"]).status.code(), Some(1));
    assert_eq!(semamil(&["flops", "--bogus"]).status.code(), Some(1));
}

#[test]
fn config_file_overrides_and_seed_compose() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(
        &p,
        r#"{"model": {"d": 12, "assign_mode": {"gumbel": {"tau": 0.5}}}, "train": {"optimizer": "sgd"}}"#,
    )
    .unwrap();
    let c = load_config(Some(&p), &["model.k=5".into(), "train.lr=0.01".into()], Some(9)).unwrap();
    assert_eq!((c.model.d, c.model.k, c.model.d_in), (12, 5, 32));
    assert_eq!(c.train.lr, 0.01);
    assert_eq!((c.data.seed, c.protocol.split_seed, c.train.seed), (9, 9, 9));
    assert_eq!(serde_json::to_value(c.train.optimizer).unwrap(), "sgd");
}

#[test]
fn gradcheck_exit_codes() {
    let o = semamil(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report = stdout(&o);
    // One row per parameter tensor plus header and summary.
    assert_eq!(report.lines().count(), 1 + 26 + 1);
    assert!(report.contains("blocks.1.w_delta"));

    let o = semamil(&["gradcheck", "--inject-fault", "router.w1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn flops_matches_library_counts() {
    let o = semamil(&["flops", "--length", "2048", "model.d=24"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let cfg = ModelConfig {
        d: 24,
        ..ModelConfig::default()
    };
    let total_flops = count_flops(&cfg, 2048).total();
    let total_params = count_params(&cfg).total();
    assert!(text.contains(&format!("{total_flops}")), "{text}");
    assert!(text.contains(&format!("{:.3}G", total_flops as f64 / 1e9)));
    assert!(text.contains(&format!("{total_params}")));
    assert!(text.contains(&format!("{:.3}M", total_params as f64 / 1e6)));
}

#[test]
fn reorder_inspect_emits_a_valid_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let mut args = vec!["gen", "--out", path(&data)];
    args.extend(SMALL);
    assert!(semamil(&args).status.success());
    let bag = data.join("bag_00003.semb");

    let o = semamil(&["reorder-inspect", "--bag", path(&bag)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: ReorderReport = serde_json::from_str(&stdout(&o)).unwrap();
    let n = r.labels.len();
    assert!((0..n).all(|j| r.pi_inv[r.pi[j]] == j));
    assert!(r.pi.windows(2).all(|w| r.labels[w[0]] <= r.labels[w[1]]));
    assert_eq!(r.cluster_sizes.iter().sum::<usize>(), n);

    let o = semamil(&["reorder-inspect", "--bag", path(&bag), "model.n_clusters=1"]);
    let r: ReorderReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.pi, (0..n).collect::<Vec<_>>());
    assert_eq!(r.cluster_sizes, [n]);
}

#[test]
fn ablate_writes_four_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--out", path(&out), "--jobs", "2", "train.epochs=1"];
    args.extend(SMALL);
    args.extend(&FAST[..1]);
    args.extend(&FAST[2..]);
    let o = semamil(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "sr,srsm,auc_mean,auc_std,acc_mean,acc_std");
    assert!(rows[1].starts_with("false,false,") && rows[4].starts_with("true,true,"));
}
