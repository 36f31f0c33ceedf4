use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use issgd::metrics::{quantile, read_csv_file, COLUMNS};

fn issgd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_issgd"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn gen(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("toy.ds");
    run_ok(issgd().args(["gen", "--n", &n.to_string(), "--dims", "6", "--classes", "3", "--seed", "2", "--out"]).arg(&path));
    path
}

fn train(ds: &Path, metrics: &Path, extra: &[&str]) -> Command {
    let mut cmd = issgd();
    cmd.args(["train", "--dataset"]).arg(ds).arg("--metrics").arg(metrics);
    cmd.args(["--hidden", "8", "--batch-size", "8"]).args(extra);
    cmd
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn zero_updates_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 60);
    let csv = dir.path().join("m.csv");
    run_ok(&mut train(&ds, &csv, &["--mode", "sgd", "--updates", "0"]));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text, format!("{}\n", COLUMNS.join(",")));
}

#[test]
fn exact_mode_rows_have_no_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 64);
    for backend in [&["--inproc"][..], &[][..]] {
        let csv = dir.path().join("exact.csv");
        let mut args = vec!["--mode", "issgd-exact", "--workers", "1", "--updates", "40", "--metrics-every", "5"];
        args.extend(["--smoothing", "0"]);
        args.extend(backend);
        run_ok(&mut train(&ds, &csv, &args));
        let rows = read_csv_file(&csv).unwrap();
        assert_eq!(rows.len(), 9);
        for r in rows {
            assert!((r.tr_stale.unwrap() - r.tr_ideal.unwrap()).abs() <= 1e-9, "{r:?}");
        }
    }
}

#[test]
fn in_process_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 200);
    let read = |name: &str| {
        let csv = dir.path().join(name);
        run_ok(&mut train(&ds, &csv, &["--mode", "issgd", "--inproc", "--updates", "60", "--metrics-every", "10", "--seed", "3"]));
        read_csv_file(&csv).unwrap().into_iter().map(|mut r| {
            r.wall_seconds = 0.0;
            r
        }).collect::<Vec<_>>()
    };
    assert_eq!(read("a.csv"), read("b.csv"));
}

#[test]
fn multi_seed_summary_matches_per_seed_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 120);
    let csv = dir.path().join("runs.csv");
    let out = run_ok(&mut train(&ds, &csv, &["--mode", "sgd", "--updates", "30", "--seeds", "4", "--seed", "10"]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut finals = Vec::new();
    for seed in 10..14 {
        let rows = read_csv_file(&dir.path().join(format!("runs.seed{seed}.csv"))).unwrap();
        finals.push(rows.last().unwrap().train_loss);
    }
    let mut sorted = finals.clone();
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[1] + sorted[2]) / 2.0;
    assert!((quantile(&finals, 0.5) - median).abs() < 1e-15);
    assert!(stdout.contains(&format!("median={median:.6}")), "{stdout}");
    assert!(stdout.contains("seeds=4"));
}

#[test]
fn invalid_flags_fail() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 30);
    let csv = dir.path().join("x.csv");
    for bad in [
        &["--mode", "adam"][..],
        &["--lr", "-1"][..],
        &["--batch-size", "0"][..],
        &["--staleness-sec", "4", "--staleness-version"][..],
        &["--inproc", "--store", "127.0.0.1:1"][..],
    ] {
        let out = train(&ds, &csv, bad).output().unwrap();
        assert!(!out.status.success(), "{bad:?} succeeded");
    }
    let out = train(&dir.path().join("missing.ds"), &csv, &[]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn store_port_in_use_fails() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = issgd().args(["store", "--port", &port]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn separate_store_worker_and_trainer_processes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 80);
    let mut store = Killed(issgd().args(["store", "--port", "0"]).stdout(Stdio::piped()).spawn().unwrap());
    let mut line = String::new();
    BufReader::new(store.0.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_owned();

    let _worker = Killed(
        issgd()
            .args(["worker", "--store", &addr, "--id", "0", "--of", "1", "--poll-ms", "2", "--dataset"])
            .arg(&ds)
            .spawn()
            .unwrap(),
    );
    let csv = dir.path().join("remote.csv");
    run_ok(&mut train(
        &ds,
        &csv,
        &["--mode", "issgd-exact", "--workers", "1", "--smoothing", "0", "--updates", "10", "--metrics-every", "5", "--store", &addr],
    ));
    let rows = read_csv_file(&csv).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 5, 10]);
    assert!(rows.iter().all(|r| (r.tr_stale.unwrap() - r.tr_ideal.unwrap()).abs() <= 1e-9));
}

#[test]
fn worker_rejects_bad_shard() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 30);
    let out = issgd().args(["worker", "--store", "127.0.0.1:1", "--id", "2", "--of", "2", "--dataset"]).arg(&ds).output().unwrap();
    assert!(!out.status.success());
}
