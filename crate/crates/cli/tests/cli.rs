use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedskel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedskel"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fedskel")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn train(cfg: &Path, out: &Path) -> Output {
    let o = fedskel(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn synthetic_fedavg_learns_its_shards() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    train(&config("synthetic-fedavg.toml"), &out);
    let s = summary(&out);
    assert_eq!(s["rounds"], 30);
    assert_eq!(s["clients"], 10);
    let local = s["final_local_acc"].as_f64().unwrap();
    assert!(local >= 0.95, "local accuracy {local}");
    for f in ["metrics.csv", "summary.json", "config.toml", "checkpoint.fskl"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn identical_runs_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("synthetic-fedskel.toml");
    train(&cfg, &tmp.path().join("a"));
    train(&cfg, &tmp.path().join("b"));
    for f in ["metrics.csv", "summary.json", "checkpoint.fskl"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn saved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    train(&config("synthetic-fedskel.toml"), &a);
    let b = tmp.path().join("b");
    train(&a.join("config.toml"), &b);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn missing_dataset_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("mnist.toml");
    fs::write(&cfg, "[data]\nsource = \"mnist\"\ndir = \"no/such/dir\"\n\n[model]\npreset = \"lenet5\"\n").unwrap();
    let o = fedskel(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("data.dir"), "stderr: {err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "sead = 3\n").unwrap();
    let o = fedskel(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("sead"));
}

#[test]
fn report_tabulates_and_rejects_mixed_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("avg");
    let b = tmp.path().join("skel");
    train(&config("synthetic-fedavg.toml"), &a);
    train(&config("synthetic-fedskel.toml"), &b);

    let o = fedskel(&["report", a.to_str().unwrap(), b.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("synthetic-fedavg") && table.contains("synthetic-fedskel"));
    let csv = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let file = b.join("summary.json");
    let text = fs::read_to_string(&file).unwrap().replace("fedskel-metrics/1", "fedskel-metrics/0");
    fs::write(&file, text).unwrap();
    let o = fedskel(&["report", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema"));
}

#[test]
fn shard_stats_covers_every_client() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fedskel(&[
        "shard-stats",
        "--config",
        config("synthetic-fedavg.toml").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("shard_stats.csv")).unwrap();
    assert!(csv.starts_with("# schema=fedskel-shards/1\n"));
    assert_eq!(csv.lines().count(), 2 + 10);
}
