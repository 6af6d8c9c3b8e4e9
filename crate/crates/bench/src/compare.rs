use serde::{Deserialize, Serialize};

use crate::metrics::RunMetrics;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("run {label} is excluded (errors or no successful requests)")]
pub struct ExcludedRun {
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VerdictRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// a / b
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Comparison {
    pub a_label: String,
    pub b_label: String,
    pub latency_ratio_p50: f64,
    pub latency_ratio_p90: f64,
    pub latency_ratio_p99: f64,
    pub latency_ratio_mean: f64,
    pub raw_throughput_ratio: f64,
    pub normalized_throughput_ratio: f64,
    pub rows: Vec<VerdictRow>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

pub fn compare_runs(a: &RunMetrics, b: &RunMetrics) -> Result<Comparison, ExcludedRun> {
    for run in [a, b] {
        if run.excluded {
            return Err(ExcludedRun {
                label: run.label.clone(),
            });
        }
    }
    let rows: Vec<VerdictRow> = [
        ("latencyP50Ms", a.latencies.p50, b.latencies.p50),
        ("latencyP90Ms", a.latencies.p90, b.latencies.p90),
        ("latencyP99Ms", a.latencies.p99, b.latencies.p99),
        ("latencyMeanMs", a.latencies.mean, b.latencies.mean),
        ("rawThroughput", a.raw_throughput, b.raw_throughput),
        ("normalizedThroughput", a.normalized_throughput, b.normalized_throughput),
    ]
    .into_iter()
    .map(|(metric, x, y)| VerdictRow {
        metric: metric.into(),
        a: x,
        b: y,
        ratio: ratio(x, y),
    })
    .collect();
    Ok(Comparison {
        a_label: a.label.clone(),
        b_label: b.label.clone(),
        latency_ratio_p50: rows[0].ratio,
        latency_ratio_p90: rows[1].ratio,
        latency_ratio_p99: rows[2].ratio,
        latency_ratio_mean: rows[3].ratio,
        raw_throughput_ratio: rows[4].ratio,
        normalized_throughput_ratio: rows[5].ratio,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrendPoint {
    /// Entity count, or entities per query.
    pub x: f64,
    pub ratio: f64,
}

/// Overhead ratios ordered by x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Trend {
    pub metric: String,
    pub points: Vec<TrendPoint>,
}

impl Trend {
    pub fn new(metric: &str, mut points: Vec<TrendPoint>) -> Self {
        points.sort_by(|p, q| p.x.total_cmp(&q.x));
        Self {
            metric: metric.into(),
            points,
        }
    }

    /// Every step may rise by at most `band` (0.1 = 10%) of the previous
    /// value.
    pub fn is_non_increasing(&self, band: f64) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].ratio <= w[0].ratio * (1.0 + band))
    }
}
