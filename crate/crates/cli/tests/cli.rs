use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "resolution=32",
    "num_scenes=40",
    "val_scenes=8",
    "gen_width=4",
    "disc_width=4",
    "cls_width=4",
    "batch_size=2",
    "labeled_ratio=0.1",
    "val_every=5",
];

fn semiseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semiseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![
        "--mode".into(),
        "train".into(),
        "--out".into(),
        out.display().to_string(),
    ];
    for kv in TINY {
        args.push("--set".into());
        args.push(kv.to_string());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = semiseg(&refs);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (PathBuf::from(p.file_name().unwrap()), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn smoke_run_writes_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--max-iter", "10"]);
    let lines = rows(&dir.path().join("metrics.csv"));
    assert_eq!(lines[0], "iter,lr,loss_ce,loss_fm,loss_st,loss_d,loss_cce,loss_cons,d_real_mean,d_fake_mean,miou_val");
    assert_eq!(lines.len(), 11);
    assert!(dir.path().join("checkpoint/header.json").exists());
    assert!(dir.path().join("score_trace.csv").exists());
    // validation at the cadence and at the end
    let with_miou = lines[1..].iter().filter(|l| !l.ends_with(',')).count();
    assert_eq!(with_miou, 2);
}

#[test]
fn supervised_only_logs_no_adversarial_columns() {
    let dir = tempfile::tempdir().unwrap();
    train(
        dir.path(),
        &["--max-iter", "4", "--set", "mode=supervised_only"],
    );
    for line in &rows(&dir.path().join("metrics.csv"))[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert!(!f[2].is_empty());
        assert!(f[3..10].iter().all(|v| v.is_empty()), "{line}");
    }
}

#[test]
fn identical_runs_write_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(a.path(), &["--max-iter", "12", "--seed", "4"]);
    train(b.path(), &["--max-iter", "12", "--seed", "4"]);
    assert_eq!(
        fs::read(a.path().join("metrics.csv")).unwrap(),
        fs::read(b.path().join("metrics.csv")).unwrap()
    );
    let c = tempfile::tempdir().unwrap();
    train(c.path(), &["--max-iter", "12", "--seed", "5"]);
    assert_ne!(
        fs::read(a.path().join("metrics.csv")).unwrap(),
        fs::read(c.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    train(whole.path(), &["--max-iter", "30"]);
    train(split.path(), &["--max-iter", "30", "--stop-at", "15"]);
    let ckpt = split.path().join("checkpoint");
    let resumed = tempfile::tempdir().unwrap();
    let o = semiseg(&[
        "--mode",
        "train",
        "--resume",
        ckpt.to_str().unwrap(),
        "--out",
        resumed.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        files(&whole.path().join("checkpoint")),
        files(&resumed.path().join("checkpoint"))
    );
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--max-iter", "6", "--stop-at", "3"]);
    let ckpt = dir.path().join("checkpoint");
    let o = semiseg(&[
        "--mode",
        "train",
        "--resume",
        ckpt.to_str().unwrap(),
        "--gamma",
        "0.9",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("different config"));
}

#[test]
fn unknown_key_lists_valid_keys() {
    let o = semiseg(&["--mode", "train", "--set", "lamda_fm=0.1"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("lamda_fm") && err.contains("lambda_fm") && err.contains("ema_decay"),
        "{err}"
    );
}

#[test]
fn resume_outside_training_is_a_usage_error() {
    let o = semiseg(&["--mode", "eval", "--resume", "nowhere"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_modes_and_threshold_sweep() {
    let dir = tempfile::tempdir().unwrap();
    train(
        dir.path(),
        &["--max-iter", "4", "--set", "cnn_baseline=true"],
    );
    let out = dir.path().to_str().unwrap();
    let o = semiseg(&[
        "--mode",
        "eval",
        "--out",
        out,
        "--fusion",
        "pixel_threshold",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = rows(&dir.path().join("eval.csv"));
    assert_eq!(table.len(), 1 + 12);
    let o = semiseg(&["--mode", "eval", "--out", out, "--fusion", "all"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = rows(&dir.path().join("eval.csv")).join("\n");
    for mode in ["none", "mlmt", "cnn", "classwise_pixel_threshold"] {
        assert!(table.contains(mode), "{table}");
    }
    let o = semiseg(&["--mode", "eval", "--out", out, "--fusion", "crf"]);
    assert!(!o.status.success());
    let o = semiseg(&["--mode", "eval", "--out", out, "--set", "num_classes=7"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("classes"));
}

#[test]
fn ablation_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["--mode", "ablation", "--out", out, "--max-iter", "3"];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    let mut loss = args.clone();
    loss.extend(["--ablation", "loss_terms"]);
    let o = semiseg(&loss);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        rows(&dir.path().join("ablation_loss_terms.csv")).len(),
        1 + 4
    );
    let mut st = args.clone();
    st.extend(["--ablation", "st_dynamics"]);
    let o = semiseg(&st);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("score_trace_with_st.csv").exists());
    assert!(dir.path().join("score_trace_without_st.csv").exists());
    let mut bad = args.clone();
    bad.extend(["--ablation", "everything"]);
    assert!(!semiseg(&bad).status.success());
}
