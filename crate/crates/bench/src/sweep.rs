use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compare::{compare_runs, Comparison, Trend, TrendPoint};
use crate::report::{append_jsonl, write_csv, RunRecord};
use crate::workload::{Topology, WorkloadSpec, DEFAULT_SEED};
use crate::{run_once, BenchError};

/// The evaluation matrix: entity counts × topologies × client counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepSpec {
    #[serde(default = "default_entity_counts")]
    pub entity_counts: Vec<usize>,
    #[serde(default = "default_client_counts")]
    pub client_counts: Vec<usize>,
    /// A multi-provider topology's per-CM share is recomputed for each
    /// entity count.
    #[serde(default = "default_topologies")]
    pub topologies: Vec<Topology>,
    #[serde(default = "default_duration")]
    pub duration_seconds: f64,
    #[serde(default = "default_warmup")]
    pub warmup_seconds: f64,
    #[serde(default = "default_attributes_per_entity")]
    pub attributes_per_entity: usize,
    #[serde(default = "default_attributes_per_query")]
    pub attributes_per_query: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub cm_service_delay_ms: u64,
    #[serde(default)]
    pub cm_service_concurrency: usize,
}

fn default_entity_counts() -> Vec<usize> {
    vec![100, 1000, 10000]
}

fn default_client_counts() -> Vec<usize> {
    vec![20, 100]
}

fn default_topologies() -> Vec<Topology> {
    vec![Topology::Centralized, Topology::FederatedUnsecured, Topology::FederatedSecured]
}

fn default_duration() -> f64 {
    60.0
}

fn default_warmup() -> f64 {
    10.0
}

fn default_attributes_per_entity() -> usize {
    100
}

fn default_attributes_per_query() -> usize {
    20
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl SweepSpec {
    /// Workloads in execution order.
    pub fn workloads(&self) -> Vec<WorkloadSpec> {
        let mut out = Vec::new();
        for &clients in &self.client_counts {
            for &entities in &self.entity_counts {
                for topology in &self.topologies {
                    let topology = match *topology {
                        Topology::MultiProvider { providers, secured, .. } => Topology::MultiProvider {
                            providers,
                            entities_each: entities / providers.max(1),
                            secured,
                        },
                        t => t,
                    };
                    let total = topology.fixed_entities().unwrap_or(entities);
                    out.push(WorkloadSpec {
                        attributes_per_entity: self.attributes_per_entity,
                        attributes_per_query: self.attributes_per_query,
                        clients,
                        duration_seconds: self.duration_seconds,
                        warmup_seconds: self.warmup_seconds,
                        seed: self.seed,
                        cm_service_delay_ms: self.cm_service_delay_ms,
                        cm_service_concurrency: self.cm_service_concurrency,
                        ..WorkloadSpec::new(topology, total)
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepComparison {
    pub total_entities: usize,
    pub clients: usize,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub comparisons: Vec<SweepComparison>,
    /// Latency ratio against centralized over entity counts, one per
    /// (topology, clients).
    pub trends: Vec<(String, usize, Trend)>,
}

/// Each topology compared with the centralized run of the same entity
/// and client counts. Excluded runs are skipped.
pub fn summarize(records: Vec<RunRecord>) -> SweepOutcome {
    let mut comparisons = Vec::new();
    for r in &records {
        if r.spec.topology == Topology::Centralized {
            continue;
        }
        let baseline = records.iter().find(|b| {
            b.spec.topology == Topology::Centralized
                && b.spec.total_entities == r.spec.total_entities
                && b.spec.clients == r.spec.clients
        });
        if let Some(Ok(comparison)) = baseline.map(|b| compare_runs(&r.metrics, &b.metrics)) {
            comparisons.push(SweepComparison {
                total_entities: r.spec.total_entities,
                clients: r.spec.clients,
                comparison,
            });
        }
    }
    let mut keys: Vec<(String, usize)> = comparisons
        .iter()
        .map(|c| (c.comparison.a_label.clone(), c.clients))
        .collect();
    keys.sort();
    keys.dedup();
    let trends = keys
        .into_iter()
        .map(|(label, clients)| {
            let points = comparisons
                .iter()
                .filter(|c| c.comparison.a_label == label && c.clients == clients)
                .map(|c| TrendPoint {
                    x: c.total_entities as f64,
                    ratio: c.comparison.latency_ratio_p50,
                })
                .collect();
            (label, clients, Trend::new("latencyP50", points))
        })
        .collect();
    SweepOutcome {
        records,
        comparisons,
        trends,
    }
}

/// Run the matrix, writing runs.jsonl, summary.csv, comparisons.jsonl
/// and trends.json under `out`.
pub async fn run_sweep(spec: &SweepSpec, out: &Path) -> Result<SweepOutcome, BenchError> {
    std::fs::create_dir_all(out)?;
    let runs = out.join("runs.jsonl");
    let mut records = Vec::new();
    for workload in spec.workloads() {
        let record = run_once(&workload).await?;
        append_jsonl(&runs, &record)?;
        records.push(record);
    }
    write_csv(&out.join("summary.csv"), &records)?;
    let outcome = summarize(records);
    for c in &outcome.comparisons {
        append_jsonl(&out.join("comparisons.jsonl"), c)?;
    }
    std::fs::write(
        out.join("trends.json"),
        serde_json::to_vec_pretty(&outcome.trends).map_err(std::io::Error::other)?,
    )?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RunMetrics;

    #[test]
    fn matrix_covers_every_combination() {
        let mut spec: SweepSpec = serde_json::from_str("{}").unwrap();
        spec.topologies.push(Topology::MultiProvider {
            providers: 10,
            entities_each: 0,
            secured: false,
        });
        let w = spec.workloads();
        assert_eq!(w.len(), 3 * 2 * 4);
        assert!(w.iter().all(|w| w.validate().is_ok()));
        assert!(w.iter().any(|w| w.topology
            == Topology::MultiProvider {
                providers: 10,
                entities_each: 1000,
                secured: false
            }));
    }

    #[test]
    fn trends_follow_entity_counts() {
        let record = |t: Topology, n: usize, p50: f64| {
            let mut m = RunMetrics::from_parts(&t.label(), 10, 0, &[p50], 10, 1.0, 0);
            m.latencies.p50 = p50;
            RunRecord {
                spec: WorkloadSpec::new(t, n),
                metrics: m,
            }
        };
        let outcome = summarize(vec![
            record(Topology::Centralized, 100, 1.0),
            record(Topology::FederatedSecured, 100, 4.0),
            record(Topology::Centralized, 1000, 2.0),
            record(Topology::FederatedSecured, 1000, 5.0),
        ]);
        assert_eq!(outcome.comparisons.len(), 2);
        let (_, _, trend) = &outcome.trends[0];
        assert_eq!(trend.points.iter().map(|p| p.ratio).collect::<Vec<_>>(), vec![4.0, 2.5]);
        assert!(trend.is_non_increasing(0.0));
    }
}
