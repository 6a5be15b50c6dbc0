use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn ripple(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ripple"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The single run directory under `root`.
fn run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn verify_manifest(dir: &Path) {
    let manifest = fs::read_to_string(dir.join("MANIFEST")).unwrap();
    assert!(manifest.contains("  config.ini\n"));
    for line in manifest.lines() {
        let (hash, name) = line.split_once("  ").unwrap();
        let bytes = fs::read(dir.join(name)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), hash, "{name}");
    }
}

#[test]
fn check_passes_by_default_and_writes_a_summary() {
    let t = tempfile::tempdir().unwrap();
    let o = ripple(t.path(), &["check", "--sizes", "4x4,6x6", "--trials", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let dir = run_dir(t.path());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("check_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["instances"], 2 * 5 * 2 * 2);
    assert_eq!(summary["passed"], true);
    verify_manifest(&dir);
}

#[test]
fn sabotaged_check_fails_and_dumps_the_worst_instance() {
    let t = tempfile::tempdir().unwrap();
    let o = ripple(t.path(), &["check", "--sizes", "5x5", "--trials", "1", "--sabotage", "ring-off-by-one"]);
    assert_eq!(o.status.code(), Some(1));
    let dir = run_dir(t.path());
    let x = ripple_core::tensor::read_field(dir.join("worst_x.rplt")).unwrap();
    assert_eq!(x.dims()[..2], [5, 5]);
    let dp = ripple_core::tensor::read_field(dir.join("worst_dp.rplt")).unwrap();
    let naive = ripple_core::tensor::read_field(dir.join("worst_naive.rplt")).unwrap();
    assert!(ripple_core::grid::rel_error(dp.data(), naive.data()) > 1e-8);
    verify_manifest(&dir);
}

#[test]
fn oversized_check_needs_force() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(ripple(t.path(), &["check", "--sizes", "17x4"]).status.code(), Some(2));
    let o = ripple(
        t.path(),
        &["check", "--sizes", "17x2", "--schemes", "uniform", "--heads", "1", "--trials", "1", "--force"],
    );
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn gradcheck_scopes() {
    let t = tempfile::tempdir().unwrap();
    for scope in ["featmap", "weights", "attention", "model"] {
        let o = ripple(t.path(), &["gradcheck", "--scope", scope]);
        assert_eq!(o.status.code(), Some(0), "{scope}: {}", stdout(&o));
        assert!(stdout(&o).contains("worst: "));
    }
    assert_eq!(ripple(t.path(), &["gradcheck", "--scope", "everything"]).status.code(), Some(2));
}

#[test]
fn bench_writes_rows_and_slopes() {
    let t = tempfile::tempdir().unwrap();
    let o = ripple(
        t.path(),
        &["bench", "--variants", "dp,naive", "--sizes", "64,144,256,576", "--repetitions", "3"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(t.path());
    let csv = fs::read_to_string(dir.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(csv.starts_with("variant,tokens,dtype,r_max,median_ns,mean_ns,stddev_ns,peak_bytes\n"));
    let slopes: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("slopes.json")).unwrap()).unwrap();
    assert_eq!(slopes["slopes"].as_object().unwrap().len(), 2);
    assert!(slopes["slopes"]["dp"]["slope"].is_number());
    assert_eq!(slopes["plan"]["seed"], 0);
}

#[test]
fn bench_rejects_bad_plans() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(ripple(t.path(), &["bench", "--repetitions", "1"]).status.code(), Some(2));
    assert_eq!(ripple(t.path(), &["bench", "--sizes", "64,100,150"]).status.code(), Some(2));
    assert_eq!(ripple(t.path(), &["bench", "--variants", "quantum"]).status.code(), Some(2));
}

#[test]
fn weights_prints_known_vectors() {
    let t = tempfile::tempdir().unwrap();
    let o = ripple(t.path(), &["weights", "--scheme", "uniform", "--grid", "5x5", "--query", "1,1"]);
    assert!(stdout(&o).contains("alpha: [0.200000, 0.200000, 0.200000, 0.200000, 0.200000]"));
    let o = ripple(t.path(), &["weights", "--scheme", "fixed-exp", "--grid", "9x9", "--query", "5,5"]);
    assert!(stdout(&o).contains("alpha: [0.500000, 0.250000, 0.125000, 0.062500, 0.062500]"));
    let grid_of = |root: &Path| {
        let dir = run_dir(root);
        fs::read_to_string(dir.join("alpha_grid.csv")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = ripple(a.path(), &["--seed", "4", "weights"]);
    let ob = ripple(b.path(), &["--seed", "4", "weights"]);
    let strip = |o: &Output| stdout(o).lines().filter(|l| !l.starts_with("outputs:")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&oa), strip(&ob));
    assert!(strip(&oa).contains("mean jsd"));
    let grid = grid_of(a.path());
    assert_eq!(grid, grid_of(b.path()));
    assert_eq!(grid.lines().count(), 8);
    assert!(grid.lines().all(|l| l.split(',').count() == 8));
}

#[test]
fn train_replays_bitwise_from_its_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = ripple(a.path(), &["--threads", "1", "train", "--steps", "4", "--log-every", "2", "--train-size", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first = run_dir(a.path());
    verify_manifest(&first);
    let cfg = first.join("config.ini");
    let o = ripple(b.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(0));
    let second = run_dir(b.path());
    for f in ["metrics.csv", "checkpoint.rplt"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let ckpt = ripple_core::tensor::read_field(first.join("checkpoint.rplt")).unwrap();
    assert_eq!(ckpt.dims().len(), 1);
}

#[test]
fn zero_step_training_logs_only_the_initial_metrics() {
    let t = tempfile::tempdir().unwrap();
    let o = ripple(t.path(), &["train", "--steps", "0", "--train-size", "8"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(run_dir(t.path()).join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn usage_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(ripple(t.path(), &["train", "--task", "sudoku"]).status.code(), Some(2));
    assert_eq!(ripple(t.path(), &["--dtype", "f16", "weights"]).status.code(), Some(2));
    assert_eq!(ripple(t.path(), &["frobnicate"]).status.code(), Some(2));
    let cfg = t.path().join("bad.ini");
    fs::write(&cfg, "[train]\nsteps = 3\nwarp_drive = on\n").unwrap();
    assert_eq!(ripple(t.path(), &["--config", cfg.to_str().unwrap(), "train"]).status.code(), Some(2));
    assert!(fs::read_dir(t.path()).unwrap().all(|e| e.unwrap().path() == cfg));
}

#[test]
fn f32_runs_quantize_inputs() {
    let t = tempfile::tempdir().unwrap();
    let o = ripple(t.path(), &["--dtype", "f32", "check", "--sizes", "4x4", "--trials", "1", "--heads", "1"]);
    assert_eq!(o.status.code(), Some(0));
}
