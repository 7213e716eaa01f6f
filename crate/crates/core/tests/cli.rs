use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hardkuma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hardkuma"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hardkuma(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

const SMALL: &str = r#"{
  "corpus": {"train_size": 300, "valid_size": 60, "test_size": 40},
  "epochs": 1,
  "eval_every": 4,
  "optimizer": "adam",
  "lr": 0.005
}"#;

#[test]
fn gen_data_default_sizes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--out", a.to_str().unwrap()]);
    ok(&["gen-data", "--out", b.to_str().unwrap()]);
    for (name, n) in [("train.jsonl", 10_000), ("valid.jsonl", 2000), ("test.jsonl", 2000)] {
        assert_eq!(lines(&a.join(name)), n);
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    assert_eq!(fs::read(a.join("vocab.json")).unwrap(), fs::read(b.join("vocab.json")).unwrap());
}

#[test]
fn invalid_rho_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let res = hardkuma(&["gen-data", "--rho", "1.5", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("rho"));
    assert!(!out.exists());
}

#[test]
fn dist_table_at_a_half() {
    let text = ok(&["dist", "--a", "0.5", "--b", "0.5", "--l", "-0.1", "--r", "1.1", "--grid", "60"]);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap(), vec!["kind", "x", "pdf", "cdf", "mass"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let cdf: Vec<f64> = rows
        .iter()
        .filter(|r| &r[0] == "density")
        .map(|r| r[3].parse().unwrap())
        .collect();
    assert_eq!(cdf.len(), 60);
    assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*cdf.last().unwrap(), 1.0);
    let masses: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| &r[0] == "mass")
        .map(|r| (r[1].parse().unwrap(), r[4].parse().unwrap()))
        .collect();
    assert_eq!(masses.len(), 2);
    assert_eq!(masses[0].0, 0.0);
    assert_eq!(masses[1].0, 1.0);
    assert!((masses[0].1 - 0.156_603).abs() < 5e-6);
    assert!((masses[1].1 - 0.206_333).abs() < 5e-6);
}

#[test]
fn dist_rejects_bad_shapes() {
    let res = hardkuma(&["dist", "--a", "-1", "--b", "0.5"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn train_then_eval_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    fs::write(p("run.json"), SMALL).unwrap();
    ok(&["gen-data", "--config", &p("run.json"), "--out", &p("data")]);
    ok(&[
        "train",
        "--config",
        &p("run.json"),
        "--data-dir",
        &p("data"),
        "--checkpoint",
        &p("best.json"),
        "--metrics",
        &p("metrics.csv"),
    ]);
    let metrics = fs::read_to_string(p("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    assert!(header.starts_with("step,epoch,train_loss"), "{header}");
    let steps: Vec<usize> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(steps.len() >= 2 && steps.windows(2).all(|w| w[0] < w[1]));

    let eval = |dump: &str| {
        ok(&["eval", "--checkpoint", &p("best.json"), "--split", "test", "--dump", &p(dump)])
    };
    let first = eval("dump1.jsonl");
    let second = eval("dump2.jsonl");
    assert_eq!(first, second);
    assert!(first.starts_with("split,examples,loss,accuracy,precision,selected_rate"));
    assert_eq!(lines(Path::new(&p("dump1.jsonl"))), 40);
    assert_eq!(fs::read(p("dump1.jsonl")).unwrap(), fs::read(p("dump2.jsonl")).unwrap());
    let rec: serde_json::Value =
        serde_json::from_str(fs::read_to_string(p("dump1.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["tokens", "gates", "gold_rationale", "prediction", "label"] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }

    // a config whose shapes differ from the checkpoint
    let other = SMALL.replace("\"epochs\": 1", "\"epochs\": 1, \"hidden\": 8");
    fs::write(p("other.json"), other).unwrap();
    let res = hardkuma(&[
        "eval",
        "--checkpoint",
        &p("best.json"),
        "--config",
        &p("other.json"),
        "--data-dir",
        &p("data"),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("checkpoint mismatch") && err.contains("expected shape"), "{err}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, SMALL).unwrap();
    let metrics = dir.path().join("m.csv");
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--eval-every",
        "1000",
        "--metrics",
        metrics.to_str().unwrap(),
    ]);
    // one row at the end of the epoch only
    assert_eq!(lines(&metrics), 2);
}

#[test]
fn unknown_config_field_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"learning_rate": 0.1}"#).unwrap();
    let res = hardkuma(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn attention_model_trains_on_the_toy_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("att.json");
    fs::write(
        &cfg,
        r#"{"model": "attention", "target_l0": 0.1, "optimizer": "adam", "lr": 0.005,
            "epochs": 1, "eval_every": 50,
            "matching": {"train_size": 400, "valid_size": 100, "test_size": 100}}"#,
    )
    .unwrap();
    let ckpt = dir.path().join("att_ckpt.json");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    let dump = dir.path().join("att.jsonl");
    ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dump", dump.to_str().unwrap()]);
    let first = fs::read_to_string(&dump).unwrap();
    assert_eq!(first.lines().count(), 100);
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(rec["attention"].as_array().unwrap().len(), 5);
    assert_eq!(rec["attention"][0].as_array().unwrap().len(), 4);
}
