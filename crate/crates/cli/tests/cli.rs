use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgraph"))
        .args(args)
        .env("TGRAPH_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tgraph(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tgraph(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("synth-{seed}"));
    ok(&[
        "synth",
        "--seed",
        seed,
        "--graphs",
        "6",
        "--nodes",
        "6..12",
        "--configs",
        "12",
        "--out",
        p(&out),
    ]);
    out
}

fn tiny_train(data: &Path, out: &Path, extra: &[&str]) -> serde_json::Value {
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--out",
        p(out),
        "--seed",
        "3",
        "--epochs",
        "2",
        "--hidden",
        "16",
        "--batch",
        "8",
        "--k-folds",
        "3",
        "--folds-trained",
        "2",
        "--folds-kept",
        "2",
    ];
    args.extend_from_slice(extra);
    serde_json::from_str(&ok(&args)).unwrap()
}

fn snapshot(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/snapshots")
        .join(format!("{name}.txt"));
    if std::env::var_os("TGRAPH_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| {
        panic!(
            "missing snapshot {}; rerun with TGRAPH_BLESS=1",
            path.display()
        )
    });
    assert_eq!(actual, expected, "help text of `{name}` changed");
}

#[test]
fn help_snapshots() {
    snapshot("help", &ok(&["--help"]));
    for cmd in [
        "synth",
        "preprocess",
        "train",
        "rank",
        "evaluate",
        "gradcheck",
        "ablate",
    ] {
        snapshot(&format!("help-{cmd}"), &ok(&[cmd, "--help"]));
    }
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "5");
    let b = dir.path().join("again");
    ok(&[
        "synth",
        "--seed",
        "5",
        "--graphs",
        "6",
        "--nodes",
        "6..12",
        "--configs",
        "12",
        "--out",
        p(&b),
    ]);
    let list = |root: &Path| {
        let mut v: Vec<PathBuf> = walk(root);
        v.sort();
        v
    };
    let (fa, fb) = (list(&a), list(&b));
    assert_eq!(fa.len(), fb.len());
    assert!(!fa.is_empty());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(
            fs::read(x).unwrap(),
            fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth(dir.path(), "2");
    let prep = dir.path().join("prep");
    let info: serde_json::Value =
        serde_json::from_str(&ok(&["preprocess", "--in", p(&raw), "--out", p(&prep)])).unwrap();
    assert_eq!(info["pruned"], true);
    assert_eq!(info["deduplicated"], true);

    let ckpt = dir.path().join("ckpt");
    let summary = tiny_train(&prep, &ckpt, &[]);
    assert_eq!(summary["folds"].as_array().unwrap().len(), 2);
    assert!(ckpt.join("fold0.ckpt").exists());
    assert!(ckpt.join("fold1.log.jsonl").exists());

    let pred = dir.path().join("pred.json");
    ok(&[
        "rank",
        "--data",
        p(&prep),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&pred),
        "--tta",
        "3",
    ]);
    let preds: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&pred).unwrap()).unwrap();
    let first = preds.as_object().unwrap().values().next().unwrap();
    let n = first["scores"].as_array().unwrap().len();
    let mut order: Vec<u64> = first["order"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    order.sort();
    assert_eq!(order, (0..n as u64).collect::<Vec<_>>());

    let report: serde_json::Value =
        serde_json::from_str(&ok(&["evaluate", "--pred", p(&pred), "--data", p(&prep)])).unwrap();
    assert_eq!(report["metric"], "kendall_tau");
    let mean = report["mean"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&mean));
}

#[test]
fn ranking_raw_data_keeps_file_indices() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth(dir.path(), "4");
    let ckpt = dir.path().join("ckpt");
    tiny_train(&raw, &ckpt, &[]);
    let pred = dir.path().join("pred.json");
    ok(&[
        "rank",
        "--data",
        p(&raw),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&pred),
        "--tta",
        "1",
    ]);
    let preds: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&pred).unwrap()).unwrap();
    for v in preds.as_object().unwrap().values() {
        assert_eq!(v["scores"].as_array().unwrap().len(), 12);
    }
    ok(&["evaluate", "--pred", p(&pred), "--data", p(&raw)]);
}

#[test]
fn single_fold_and_collection_check() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth(dir.path(), "6");
    let out = dir.path().join("one");
    let summary = tiny_train(
        &raw,
        &out,
        &["--fold", "2", "--collection", "layout:xla:random"],
    );
    assert_eq!(summary["kept"], serde_json::json!([2]));
    assert!(out.join("fold2.ckpt").exists());
    assert!(!out.join("fold0.ckpt").exists());

    let wrong = [
        "train",
        "--data",
        p(&raw),
        "--out",
        p(&out),
        "--epochs",
        "1",
        "--collection",
        "tile:xla",
    ];
    assert_eq!(code(&wrong), 2);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth(dir.path(), "8");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    tiny_train(&raw, &a, &[]);
    tiny_train(&raw, &b, &["--parallel-folds"]);
    for f in ["fold0.ckpt", "fold1.ckpt", "fold0.log.jsonl", "cv.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn config_file_is_applied_and_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth(dir.path(), "9");
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"hidden_dim": 8, "se_reduction": 2}, "train": {"lr_peak": 0.004, "epochs": 7}}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    let summary = tiny_train(&raw, &out, &["--config", p(&cfg)]);
    assert_eq!(summary["model"]["hidden_dim"], 16);
    assert_eq!(summary["model"]["se_reduction"], 2);
    assert_eq!(summary["train"]["lr_peak"], 0.004);
    assert_eq!(summary["train"]["epochs"], 2.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = dir.path().join("out");
    assert_eq!(code(&["train", "--data", p(&missing), "--out", p(&out)]), 4);
    assert_eq!(code(&["train", "--bogus"]), 2);

    let raw = synth(dir.path(), "1");
    assert_eq!(
        code(&[
            "train",
            "--data",
            p(&raw),
            "--out",
            p(&out),
            "--hidden",
            "7"
        ]),
        2
    );
    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"train": {"epoch": 3}}"#).unwrap();
    assert_eq!(
        code(&[
            "train",
            "--data",
            p(&raw),
            "--out",
            p(&out),
            "--config",
            p(&bad_cfg)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "ablate",
            "--data",
            p(&raw),
            "--out",
            p(&out),
            "--variants",
            "no-gates"
        ]),
        2
    );
    assert_eq!(
        code(&["ablate", "--data", p(&raw), "--out", p(&out), "--no-edges"]),
        2
    );
    let pred = dir.path().join("pred.json");
    fs::write(&pred, "{}").unwrap();
    assert_eq!(
        code(&["evaluate", "--pred", p(&pred), "--data", p(&raw)]),
        2
    );
}

#[test]
fn ablate_without_flags_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth(dir.path(), "3");
    let t = dir.path().join("t");
    let a = dir.path().join("a");
    let summary = tiny_train(&raw, &t, &[]);
    let table = ok(&[
        "ablate",
        "--data",
        p(&raw),
        "--out",
        p(&a),
        "--seed",
        "3",
        "--epochs",
        "2",
        "--hidden",
        "16",
        "--batch",
        "8",
        "--k-folds",
        "3",
        "--folds-trained",
        "2",
        "--folds-kept",
        "2",
    ]);
    assert!(table.starts_with("variant"), "{table}");
    assert_eq!(
        fs::read(t.join("fold0.ckpt")).unwrap(),
        fs::read(a.join("full/fold0.ckpt")).unwrap()
    );
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["variant"], "full");
    assert_eq!(rows[0]["mean_val_tau"], summary["mean_val_tau"]);
    assert_eq!(rows[0]["delta"], 0.0);
}

#[test]
fn gradcheck_command_passes() {
    let stdout = ok(&["gradcheck", "--seed", "4"]);
    let lines: Vec<serde_json::Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() > 10);
    assert!(lines.iter().all(|l| l["pass"] == true));
}
