use std::path::Path;
use std::process::{Command, Output};

use fhdm::io::trajectories_from_csv;
use fhdm::SampleBatch;

fn fhdm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fhdm"))
        .args(args)
        .current_dir(dir)
        .env_remove("FHDM_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fhdm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn simulate_writes_one_id_per_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "simulate", "--scheme", "sphere:d=2", "--n", "10", "--dt", "1e-3", "--max-steps", "1000000",
            "--seed", "1", "--out", "t.csv",
        ],
    );
    let (_, trajs) = trajectories_from_csv(&read(dir.path(), "t.csv")).unwrap();
    assert_eq!(trajs.len(), 10);
    assert!(trajs.iter().all(|t| t.hit));
}

#[test]
fn seed_determines_output_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str, seed: &str| {
        ok(
            dir.path(),
            &["simulate", "--scheme", "boolean:d=3", "--n", "25", "--every", "10", "--seed", seed, "--out", out],
        )
    };
    run("a.csv", "7");
    run("b.csv", "7");
    run("c.csv", "8");
    assert_eq!(read(dir.path(), "a.csv"), read(dir.path(), "b.csv"));
    assert_ne!(read(dir.path(), "a.csv"), read(dir.path(), "c.csv"));
}

#[test]
fn env_seed_is_the_default() {
    let dir = tempfile::tempdir().unwrap();
    let with_env = |out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_fhdm"))
            .args(["hsample", "--scheme", "boolean:d=2", "--ratio", "bernoulli:p=0.3,0.6"])
            .args(["--m", "8", "--n", "40", "--out", out])
            .current_dir(dir.path())
            .env("FHDM_SEED", "11")
            .status()
            .unwrap();
        assert!(status.success());
    };
    with_env("env.csv");
    ok(
        dir.path(),
        &[
            "hsample", "--scheme", "boolean:d=2", "--ratio", "bernoulli:p=0.3,0.6", "--m", "8", "--n", "40",
            "--seed", "11", "--out", "flag.csv",
        ],
    );
    assert_eq!(read(dir.path(), "env.csv"), read(dir.path(), "flag.csv"));
}

#[test]
fn tv_of_a_file_with_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--scheme", "sphere:d=2", "--n", "50", "--every", "1000", "--out", "x.csv"]);
    let printed = ok(dir.path(), &["eval", "--metric", "tv", "--a", "x.csv", "--b", "x.csv", "--bins", "36"]);
    assert_eq!(printed.trim(), "0.0");
}

#[test]
fn written_csvs_reingest_without_loss() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["hsample", "--scheme", "sphere:d=3", "--ratio", "uniform", "--m", "4", "--n", "30", "--out", "h.csv"]);
    let text = read(d, "h.csv");
    let batch = SampleBatch::from_csv(&text).unwrap();
    assert_eq!(batch.to_csv(), text);

    ok(d, &["simulate", "--scheme", "boolean:d=2", "--n", "12", "--out", "s.csv"]);
    let text = read(d, "s.csv");
    let (comments, trajs) = trajectories_from_csv(&text).unwrap();
    assert_eq!(fhdm::io::trajectories_to_csv(&trajs, &comments), text);

    // Trajectory files feed the evaluators directly.
    assert_eq!(ok(d, &["eval", "--metric", "ks", "--a", "s.csv", "--b", "s.csv", "--project", "tau"]).trim(), "0.0");
    ok(d, &["hitreport", "--in", "s.csv", "--out", "h.svg", "--csv", "r.csv"]);
    assert!(read(d, "h.svg").starts_with("<svg"));
    assert!(read(d, "r.csv").starts_with("metric,value,n,bins,notes"));
}

#[test]
fn pooled_bridges_end_at_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["pool", "--scheme", "boolean:d=2", "--n", "100", "--every", "20", "--out", "p.csv"]);
    ok(d, &["bridge", "--scheme", "boolean:d=2", "--target", "1,0", "--n", "4", "--pool", "p.csv", "--out", "b.csv"]);
    let (_, trajs) = trajectories_from_csv(&read(d, "b.csv")).unwrap();
    assert_eq!(trajs.len(), 4);
    for t in &trajs {
        assert_eq!(t.states.last().unwrap(), &vec![1.0, 0.0]);
    }
}

#[test]
fn train_then_sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["hsample", "--scheme", "boolean:d=2", "--ratio", "bernoulli:p=0.2,0.7", "--m", "8", "--n", "60", "--out", "data.csv"]);
    std::fs::write(d.join("t.cfg"), "scheme = boolean:d=2\nepochs = 2\nbatch_size = 16\nhidden = 8\nlayers = 1\n").unwrap();
    for m in ["m1.txt", "m2.txt"] {
        ok(d, &["train", "--config", "t.cfg", "--data", "data.csv", "--out", m, "--set", "lr=0.01", "--log", "log.csv"]);
    }
    assert_eq!(read(d, "m1.txt"), read(d, "m2.txt"));
    assert_eq!(read(d, "log.csv").lines().count(), 3);
    ok(d, &["sample", "--model", "m1.txt", "--n", "20", "--out", "s.csv"]);
    let s = SampleBatch::from_csv(&read(d, "s.csv")).unwrap();
    assert_eq!(s.len(), 20);
    assert!(s.points.iter().flatten().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn converge_writes_one_row_per_delta() {
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(
        dir.path(),
        &[
            "converge", "--scheme", "sphere:d=2", "--deltas", "1e-2,5e-3", "--ref", "2.5e-3", "--n", "200",
            "--z0", "0.3,0", "--out", "c.csv",
        ],
    );
    assert!(printed.starts_with("slope="));
    let csv = read(dir.path(), "c.csv");
    assert_eq!(csv.lines().next(), Some("delta,sq_w1,n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = fhdm(d, &["simulate", "--scheme", "torus:d=2", "--n", "2", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sphere:d=<n>") && err.contains("boolean:d=<n>"), "{err}");

    let out = fhdm(d, &["hsample", "--scheme", "boolean:d=2", "--ratio", "gauss", "--n", "2", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bernoulli:p=<csv>"));

    assert_eq!(fhdm(d, &["simulate", "--n", "2"]).status.code(), Some(1));
    assert_eq!(fhdm(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fhdm(d, &["--help"]).status.code(), Some(0));
    assert_eq!(fhdm(d, &["--version"]).status.code(), Some(0));
    assert_eq!(
        fhdm(d, &["bridge", "--scheme", "boolean:d=2", "--target", "0.5,1", "--n", "1", "--out", "x.csv"]).status.code(),
        Some(1)
    );
    // Missing inputs are runtime failures, not usage errors.
    assert_eq!(fhdm(d, &["eval", "--metric", "tv", "--a", "nope.csv", "--b", "nope.csv"]).status.code(), Some(2));
    assert!(!d.join("x.csv").exists());
}
