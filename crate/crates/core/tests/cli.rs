use std::fs;
use std::path::Path;
use std::process::Command;

use ovor::data::{read_embeddings, EMBEDDING_MAGIC};
use serde_json::Value;

fn ovor(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ovor")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const QUICK: &str = r#"{"preset": "fig1", "epochs": 5}"#;

#[test]
fn help_lists_config_keys() {
    let (code, out, _) = ovor(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("vor.lambda = 0.1"), "{out}");
    assert!(out.contains("npos.k = 100"));
    assert!(out.contains("fig1"));
}

#[test]
fn invalid_configs_exit_one_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let out_s = out.to_str().unwrap();
    let cases = [
        r#"{"vor": {"lambda": -1}}"#,
        r#"{"npos": {"k": 0}}"#,
        r#"{"unknown_key": 1}"#,
        r#"{"preset": "fig1", "npos": {"k": 500}}"#,
        "not json",
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("bad{i}.json"), text);
        let (code, _, err) = ovor(&["train", "--config", &cfg, "--out", out_s]);
        assert_eq!(code, 1, "{text}: {err}");
        assert!(!out.exists(), "{text} created the output directory");
    }
    let (code, _, err) = ovor(&["train", "--config", "/definitely/missing.json", "--out", out_s]);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = ovor(&["train", "--seed", "3..1", "--out", out_s]);
    assert_eq!(code, 1);
    let (code, _, _) = ovor(&["no-such-command"]);
    assert_eq!(code, 1);
    assert!(!out.exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", QUICK);
    let out = dir.path().join("ev");
    let (code, _, _) = ovor(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        "/no/such/file.cilf",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn train_report_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", QUICK);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let (code, _, err) = ovor(&["train", "--config", &cfg, "--seed", "0..1", "--out", run_s]);
    assert_eq!(code, 0, "{err}");
    for s in 0..2 {
        for f in ["manifest.json", "timings.json", "scores.csv", "checkpoint.cilf"] {
            assert!(run.join(format!("seed-{s}")).join(f).is_file(), "seed {s} {f}");
        }
    }
    let agg: Value = serde_json::from_str(&fs::read_to_string(run.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["seeds"], serde_json::json!([0, 1]));

    let manifest: Value = serde_json::from_str(&fs::read_to_string(run.join("seed-1/manifest.json")).unwrap()).unwrap();
    assert!(manifest.get("train_seconds").is_none());
    let csv = fs::read_to_string(run.join("seed-1/scores.csv")).unwrap();
    assert!(csv.starts_with("after_task,task_1,task_2\n"));

    // a second run writes identical deterministic files
    let again = dir.path().join("again");
    assert_eq!(
        ovor(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            "0..1",
            "--out",
            again.to_str().unwrap()
        ])
        .0,
        0
    );
    for f in ["seed-1/manifest.json", "seed-0/scores.csv", "aggregate.json"] {
        assert!(
            fs::read_to_string(run.join(f)).unwrap() == fs::read_to_string(again.join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(
        fs::read(run.join("seed-1/checkpoint.cilf")).unwrap()
            == fs::read(again.join("seed-1/checkpoint.cilf")).unwrap()
    );

    let rep = dir.path().join("rep");
    let (code, out, _) = ovor(&["report", "--run", run_s, "--out", rep.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.starts_with("seed,A_T,F_T,cross_task_errors\n0,"));
    assert_eq!(out.lines().count(), 3);

    let ev = dir.path().join("ev");
    let ckpt = run.join("seed-1/checkpoint.cilf");
    let (code, _, err) = ovor(&[
        "eval",
        "--config",
        &cfg,
        "--seed",
        "1",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let e: Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(e["average_accuracy"], manifest["average_accuracy"][1]);
    assert_eq!(e["cross_task_errors"], manifest["cross_task_errors"][1]);
    assert_eq!(e["task_given"], manifest["task_given"][1]);
}

#[test]
fn sweep_writes_axis_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", QUICK);
    let out = dir.path().join("sw");
    let (code, stdout, err) = ovor(&[
        "sweep",
        "--config",
        &cfg,
        "--seed",
        "0",
        "--axis",
        "lambda",
        "--values",
        "0.1,1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv, stdout);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,0.1,1");
    assert!(lines[1].starts_with("A_T,") && lines[1].split(',').count() == 3);
    assert!(lines[2].starts_with("F_T,"));

    let bad = dir.path().join("bad");
    for args in [
        ["--axis", "lambda", "--values", ""],
        ["--axis", "nonsense", "--values", "1"],
    ] {
        let mut a = vec!["sweep", "--config", &cfg, "--out", bad.to_str().unwrap()];
        a.extend(args);
        assert_eq!(ovor(&a).0, 1, "{args:?}");
    }
    assert!(!bad.exists());
}

#[test]
fn synthetic_and_outlier_dumps_are_embedding_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", QUICK);
    let g = dir.path().join("g");
    assert_eq!(
        ovor(&[
            "gen-synthetic",
            "--config",
            &cfg,
            "--seed",
            "0",
            "--out",
            g.to_str().unwrap()
        ])
        .0,
        0
    );
    let train = read_embeddings(&g.join("train-seed0.cile")).unwrap();
    assert_eq!((train.len(), train.features.cols(), train.num_classes), (400, 2, 4));
    assert_eq!(&fs::read(g.join("test-seed0.cile")).unwrap()[..4], EMBEDDING_MAGIC);

    let d = dir.path().join("d");
    let (code, _, err) = ovor(&[
        "dump-outliers",
        "--config",
        &cfg,
        "--seed",
        "0",
        "--out",
        d.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    for t in 0..2 {
        let f = read_embeddings(&d.join(format!("outliers-task{t}.cile"))).unwrap();
        // 200 features and β·C = 320 outliers, labelled with the extra class
        assert_eq!(f.len(), 520);
        assert_eq!(f.features.cols(), 16);
        assert_eq!(f.labels.iter().filter(|&&l| l == 4).count(), 320);
    }
    let off = write_config(dir.path(), "off.json", r#"{"preset": "fig1", "regularizer": false}"#);
    assert_eq!(
        ovor(&[
            "dump-outliers",
            "--config",
            &off,
            "--out",
            dir.path().join("x").to_str().unwrap()
        ])
        .0,
        1
    );
}
