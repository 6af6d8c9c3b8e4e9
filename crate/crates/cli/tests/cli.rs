use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use liots_bench::metrics::RunMetrics;
use liots_bench::report::append_jsonl;
use liots_bench::{RunRecord, Topology, WorkloadSpec};

fn liots() -> Command {
    Command::new(env!("CARGO_BIN_EXE_liots"))
}

fn specs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../specs"))
}

#[test]
fn seed_writes_the_deterministic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("w.json");
    std::fs::write(&spec, r#"{"topology":{"kind":"centralized"},"totalEntities":25,"attributesPerEntity":3,"attributesPerQuery":2}"#).unwrap();
    let run = |out: &Path| {
        let status = liots()
            .args(["bench", "seed", "--spec"])
            .arg(&spec)
            .arg("--out")
            .arg(out)
            .stdout(Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read_to_string(out.join("seed.jsonl")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a.lines().count(), 25);
    assert_eq!(a, b);
    assert!(a.lines().next().unwrap().contains("\"e-0\""));
}

#[test]
fn compare_and_plot_from_recorded_runs() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs.jsonl");
    for (topology, p50) in [(Topology::Centralized, 2.0), (Topology::FederatedSecured, 5.0)] {
        let mut metrics = RunMetrics::from_parts(&topology.label(), 100, 0, &[p50; 100], 10_000, 10.0, 1);
        metrics.latencies.p50 = p50;
        append_jsonl(&runs, &RunRecord { spec: WorkloadSpec::new(topology, 1000), metrics }).unwrap();
    }
    let out = dir.path().join("out");
    let output = liots().args(["bench", "compare", "--spec"]).arg(&runs).arg("--out").arg(&out).output().unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("latency p50 x2.50"));
    assert_eq!(std::fs::read_to_string(out.join("comparisons.jsonl")).unwrap().lines().count(), 1);

    let status = liots().args(["bench", "plot", "--spec"]).arg(&runs).arg("--out").arg(&out).stdout(Stdio::null()).status().unwrap();
    assert!(status.success());
    assert!(std::fs::read_to_string(out.join("latency.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn domain_up_then_status() {
    let dir = tempfile::tempdir().unwrap();
    let status_file = dir.path().join("status.json");
    let mut child = liots()
        .args(["domain", "up"])
        .arg(specs().join("domain.json"))
        .arg("--status-file")
        .arg(&status_file)
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    while !status_file.exists() && start.elapsed() < Duration::from_secs(60) {
        std::thread::sleep(Duration::from_millis(100));
    }
    let output = liots().arg("status").arg("--status-file").arg(&status_file).output().unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stdout));
    let up = String::from_utf8_lossy(&output.stdout).lines().filter(|l| l.starts_with("up")).count();
    assert!(up >= 8, "only {up} services up");

    let after = liots().arg("status").arg("--status-file").arg(&status_file).output().unwrap();
    assert!(!after.status.success());
}

#[test]
fn serve_runs_a_single_discovery() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("discovery.json");
    std::fs::write(&config, r#"{"origin":"solo"}"#).unwrap();
    let mut child = liots()
        .args(["serve", "discovery"])
        .arg(&config)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    std::io::BufRead::read_line(&mut std::io::BufReader::new(child.stdout.take().unwrap()), &mut line).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    let printed: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert!(printed["endpoint"].as_str().unwrap().starts_with("http://127.0.0.1:"));
}
