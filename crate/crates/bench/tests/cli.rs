use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wbft_bench::report::{from_csv, CSV_HEADER};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wbft-bench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let file = scenarios().join("rbc-batcher-n4.toml");
    let o = bench(&[
        "--format",
        "csv",
        "--out",
        out.to_str().unwrap(),
        "run",
        file.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    let reports = from_csv(&csv).unwrap();
    assert_eq!(reports[0].scenario, "rbc-batcher-n4");
    assert!(reports[0].safety.is_pass());
}

#[test]
fn seed_override_changes_report() {
    let file = scenarios().join("hbbft-lc-n4.toml");
    let f = file.to_str().unwrap();
    let a = bench(&["--format", "csv", "run", f]);
    let b = bench(&["--format", "csv", "run", f]);
    let c = bench(&["--format", "csv", "--seed", "99", "run", f]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(
        from_csv(&String::from_utf8(c.stdout).unwrap()).unwrap()[0].seed,
        99
    );
}

#[test]
fn suite_runs_every_file() {
    let o = bench(&["--format", "csv", "suite", scenarios().to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let reports = from_csv(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let files = std::fs::read_dir(scenarios()).unwrap().count();
    assert_eq!(reports.len(), files);
    assert!(reports.iter().all(|r| r.safety.is_pass() && r.completed));
}

#[test]
fn compare_outputs_factors() {
    let s = scenarios();
    let a = s.join("rbc-batcher-n4.toml");
    let b = s.join("rbc-baseline-n4.toml");
    let o = bench(&[
        "--format",
        "csv",
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.starts_with("metric,factor\ntransmissions,3.000000\n"),
        "{text}"
    );

    let same = bench(&[
        "--format",
        "csv",
        "compare",
        a.to_str().unwrap(),
        a.to_str().unwrap(),
    ]);
    let text = String::from_utf8(same.stdout).unwrap();
    assert!(
        text.lines().skip(1).all(|l| l.ends_with(",1.000000")),
        "{text}"
    );
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        "protocol = \"hbbft-lc\"\ntopology = { single = 4 }\nloss_rate = 2.0\n",
    );
    let o = bench(&["run", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss_rate"));

    let a = write(
        dir.path(),
        "a.toml",
        "component = \"rbc\"\ntopology = { single = 4 }\n",
    );
    let b = write(
        dir.path(),
        "b.toml",
        "component = \"cbc\"\ntopology = { single = 4 }\n",
    );
    assert_eq!(bench(&["compare", &a, &b]).status.code(), Some(1));

    assert_eq!(bench(&["run", "/nonexistent.toml"]).status.code(), Some(1));
    assert_eq!(
        bench(&["suite", dir.path().join("empty").to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(bench(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bench(&["--help"]).status.code(), Some(0));
}

#[test]
fn table1_small() {
    let o = bench(&["--format", "csv", "table1", "--n", "4"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(!o.stdout.is_empty());
}
