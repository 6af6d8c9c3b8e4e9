//! Load generation and measurement for the context exchange: seeds a
//! topology with synthetic sensor data, drives concurrent query clients
//! and reports latency and (entity-normalized) throughput.

pub mod compare;
pub mod data;
pub mod metrics;
pub mod plot;
pub mod report;
pub mod runner;
pub mod sweep;
pub mod topology;
pub mod workload;

use std::sync::Arc;

pub use compare::{compare_runs, Comparison, ExcludedRun, Trend, TrendPoint, VerdictRow};
pub use data::SeedData;
pub use metrics::{LatencySummary, RunMetrics};
pub use report::{RunRecord, SummaryRow};
pub use runner::run_workload;
pub use sweep::{run_sweep, SweepSpec};
pub use topology::{RunningTopology, SetupError};
pub use workload::{EntitiesPerQuery, Topology, WorkloadError, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Start the topology, seed it and run the workload once.
pub async fn run_once(spec: &WorkloadSpec) -> Result<RunRecord, BenchError> {
    spec.validate()?;
    let data = Arc::new(SeedData::generate(spec.seed, spec.total_entities, spec.attributes_per_entity));
    let topology = RunningTopology::start(spec).await?;
    topology.seed(&data).await?;
    let metrics = run_workload(Arc::new(topology), spec, data).await;
    Ok(RunRecord {
        spec: spec.clone(),
        metrics,
    })
}
