use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::RunMetrics;
use crate::workload::WorkloadSpec;

/// One measured run as written to the JSON lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunRecord {
    pub spec: WorkloadSpec,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryRow {
    pub topology: String,
    pub total_entities: usize,
    pub clients: usize,
    pub max_entities_per_query: usize,
    pub requests: u64,
    pub errors: u64,
    pub excluded: bool,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub raw_throughput: f64,
    pub normalized_throughput: f64,
    pub seed: u64,
}

impl From<&RunRecord> for SummaryRow {
    fn from(r: &RunRecord) -> Self {
        let m = &r.metrics;
        Self {
            topology: m.label.clone(),
            total_entities: r.spec.total_entities,
            clients: r.spec.clients,
            max_entities_per_query: r.spec.entities_per_query().max(),
            requests: m.request_count,
            errors: m.error_count,
            excluded: m.excluded,
            p50_ms: m.latencies.p50,
            p90_ms: m.latencies.p90,
            p99_ms: m.latencies.p99,
            mean_ms: m.latencies.mean,
            raw_throughput: m.raw_throughput,
            normalized_throughput: m.normalized_throughput,
            seed: m.seed,
        }
    }
}

pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(value).map_err(std::io::Error::other)?;
    writeln!(f, "{line}")
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

pub fn write_csv(path: &Path, records: &[RunRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::other)?;
    for r in records {
        w.serialize(SummaryRow::from(r)).map_err(std::io::Error::other)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Topology;

    #[test]
    fn jsonl_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let record = RunRecord {
            spec: WorkloadSpec::new(Topology::FederatedSecured, 100),
            metrics: RunMetrics::from_parts("federated-secured", 10, 0, &[1.0, 2.0], 500, 2.0, 9),
        };
        let jsonl = dir.path().join("runs.jsonl");
        append_jsonl(&jsonl, &record).unwrap();
        append_jsonl(&jsonl, &record).unwrap();
        let back: Vec<RunRecord> = read_jsonl(&jsonl).unwrap();
        assert_eq!(back, vec![record.clone(), record.clone()]);

        let csv_path = dir.path().join("summary.csv");
        write_csv(&csv_path, &back).unwrap();
        let mut reader = csv::Reader::from_path(&csv_path).unwrap();
        let rows: Vec<SummaryRow> = reader.deserialize().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].normalized_throughput, 250.0);
    }
}
