use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fgat");

fn fgat(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_synth(out: &Path, classes: &str, tasks: &str, seed: &str) -> Output {
    fgat(&[
        "gen-synth",
        "--classes",
        classes,
        "--tasks",
        tasks,
        "--per-class",
        "8",
        "--scales",
        "2,4,4;3,2,2",
        "--sep",
        "2.0",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

fn write_config(dir: &Path, manifest: &Path, out: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "manifest": manifest,
        "seeds": [0, 1],
        "out": out,
        "model": {"heads": 2, "channels": 3, "hidden": 8, "graph": {"k": 4, "normalize_xy": false}},
        "train": {"rehearsal_per_class": 2, "duplication": 2, "batch_size": 4}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_synth_splits_ten_classes_into_five_disjoint_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let o = gen_synth(dir.path(), "10", "5", "3");
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("manifest.json"))).unwrap();
    let tasks: Vec<Vec<u64>> = serde_json::from_value(manifest["tasks"].clone()).unwrap();
    assert_eq!(tasks.len(), 5);
    let mut all: Vec<u64> = tasks.iter().flatten().copied().collect();
    assert!(tasks.iter().all(|t| t.len() == 2));
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
}

#[test]
fn gen_synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(gen_synth(a.path(), "4", "2", "7").status.success());
    assert!(gen_synth(b.path(), "4", "2", "7").status.success());
    for f in ["train.fmap", "test.fmap", "manifest.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    assert!(gen_synth(c.path(), "4", "2", "8").status.success());
    assert_ne!(read(&a.path().join("train.fmap")), read(&c.path().join("train.fmap")));
}

#[test]
fn gen_synth_rejects_uneven_split() {
    let dir = tempfile::tempdir().unwrap();
    let o = gen_synth(dir.path(), "10", "3", "0");
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("train.fmap").exists());
}

#[test]
fn missing_fmap_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen_synth(dir.path(), "4", "2", "0").status.success());
    std::fs::remove_file(dir.path().join("test.fmap")).unwrap();
    let config = write_config(dir.path(), &dir.path().join("manifest.json"), &dir.path().join("out"));
    let o = fgat(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("test.fmap"), "{}", stderr(&o));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"manifest": "m.json", "bogus": 1}"#).unwrap();
    let o = fgat(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn run_writes_layout_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen_synth(&data, "4", "2", "1").status.success());
    let out1 = dir.path().join("out1");
    let config = write_config(dir.path(), &data.join("manifest.json"), &out1);
    let o = fgat(&["run", "--config", config.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["summary.csv", "summary.json", "config.echo.json"] {
        assert!(out1.join(f).exists(), "{f}");
    }
    for seed in ["0", "1"] {
        for f in ["matrix.json", "events.jsonl", "model.fgck"] {
            assert!(out1.join(seed).join(f).exists(), "{seed}/{f}");
        }
    }
    let csv = String::from_utf8(read(&out1.join("summary.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 2);

    // Flags override the config.
    let out2 = dir.path().join("out2");
    let o = fgat(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["0/matrix.json", "1/matrix.json", "summary.csv", "0/model.fgck"] {
        assert_eq!(read(&out1.join(f)), read(&out2.join(f)), "{f}");
    }

    // The echoed config reproduces the run from its resolved defaults.
    let echo = out1.join("config.echo.json");
    let parsed: serde_json::Value = serde_json::from_slice(&read(&echo)).unwrap();
    assert_eq!(parsed["model"]["leaky_slope"], 0.2);
    assert_eq!(parsed["train"]["temperature"], 2.0);
    let out3 = dir.path().join("out3");
    let o = fgat(&[
        "run",
        "--config",
        echo.to_str().unwrap(),
        "--out",
        out3.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&out1.join("summary.json")), read(&out3.join("summary.json")));

    // A single seed from the command line.
    let out4 = dir.path().join("out4");
    let o = fgat(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out4.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out4.join("0").exists());
    assert_eq!(read(&out1.join("1/matrix.json")), read(&out4.join("1/matrix.json")));

    // The saved model evaluates to the final-row accuracy on the last task's data.
    let o = fgat(&[
        "eval",
        "--checkpoint",
        out1.join("0/model.fgck").to_str().unwrap(),
        "--fmap",
        data.join("test.fmap").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["samples"], 8);
    let matrix: serde_json::Value = serde_json::from_slice(&read(&out1.join("0/matrix.json"))).unwrap();
    let avg = matrix["average_accuracy"].as_f64().unwrap();
    assert!((report["accuracy"].as_f64().unwrap() - avg).abs() < 1e-12);
}

#[test]
fn gradcheck_passes_and_lists_every_component() {
    let o = fgat(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for name in fgat_core::gradcheck::COMPONENTS {
        assert!(stdout.contains(name), "{name} missing");
    }
}

#[test]
fn gradcheck_reports_injected_fault() {
    let o = fgat(&["gradcheck", "--inject-fault", "lwf_loss"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lwf_loss"), "{}", stderr(&o));
}
