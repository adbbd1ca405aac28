//! End-to-end smoke tests against the built binary, on a deliberately tiny
//! config so the whole chain stays in the seconds range.

use std::path::Path;
use std::process::{Command, Output};

fn bera(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bera"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn bera")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{} failed ({:?}):\n{}",
        what,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &str = "episodes = 12\n\
                    train_steps = 10\n\
                    sweep_fractions = 0.10\n\
                    sweep_rates = 0.2\n\
                    sweep_types = checkerboard\n";

#[test]
fn whole_chain_runs_and_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");

    for cmd in [
        &["gen"][..],
        &["calibrate"],
        &["train"],
        &["detect", "--episode", "0"],
        &["evaluate"],
        &["ablate"],
        &["sweep"],
    ] {
        assert_ok(&bera(&cfg, &out, cmd), cmd[0]);
    }

    let task = out.join("task0");
    for rel in [
        "manifest.tsv",
        "reference.btfa",
        "decoder.btfa",
        "loss.csv",
        "report.json",
        "ablation.csv",
        "sweep.csv",
    ] {
        assert!(task.join(rel).exists(), "missing artifact {}", rel);
    }
    assert!(out.join("config.txt").exists());

    let report = std::fs::read_to_string(task.join("report.json")).unwrap();
    assert!(report.starts_with('{'));
    for key in ["\"version\"", "\"config\"", "\"cp\"", "\"asr\"", "\"tp\"", "\"rp\""] {
        assert!(report.contains(key), "report.json misses {}", key);
    }

    // Re-running evaluate must reproduce the report byte for byte.
    let before = std::fs::read(task.join("report.json")).unwrap();
    assert_ok(&bera(&cfg, &out, &["evaluate"]), "second evaluate");
    let after = std::fs::read(task.join("report.json")).unwrap();
    assert_eq!(before, after);

    let manifest = std::fs::read_to_string(task.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 13);
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "episodes = 0\n").unwrap();
    let r = bera(&bad, &out, &["gen"]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));

    let unknown = dir.path().join("unknown.cfg");
    std::fs::write(&unknown, "episodse = 10\n").unwrap();
    let r = bera(&unknown, &out, &["gen"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown key"));
}

#[test]
fn missing_prerequisites_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("empty");
    let r = bera(&cfg, &out, &["evaluate"]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bera gen"));
}
