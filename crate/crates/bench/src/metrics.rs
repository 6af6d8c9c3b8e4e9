use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencySummary {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
    pub max: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencySummary {
    pub fn of(latencies_ms: &[f64]) -> Self {
        if latencies_ms.is_empty() {
            return Self::default();
        }
        let mut sorted = latencies_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            p50: percentile(&sorted, 50.0),
            p90: percentile(&sorted, 90.0),
            p99: percentile(&sorted, 99.0),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            max: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunMetrics {
    pub label: String,
    pub request_count: u64,
    pub error_count: u64,
    pub latencies: LatencySummary,
    /// Requests per second.
    pub raw_throughput: f64,
    /// Entities returned per second.
    pub normalized_throughput: f64,
    pub entities_returned_total: u64,
    pub elapsed_seconds: f64,
    /// Set when any request failed or none succeeded.
    pub excluded: bool,
    pub seed: u64,
}

impl RunMetrics {
    pub fn from_parts(
        label: &str,
        request_count: u64,
        error_count: u64,
        latencies_ms: &[f64],
        entities_returned_total: u64,
        elapsed_seconds: f64,
        seed: u64,
    ) -> Self {
        let per_second = |n: u64| if elapsed_seconds > 0.0 { n as f64 / elapsed_seconds } else { 0.0 };
        Self {
            label: label.into(),
            request_count,
            error_count,
            latencies: LatencySummary::of(latencies_ms),
            raw_throughput: per_second(request_count),
            normalized_throughput: per_second(entities_returned_total),
            entities_returned_total,
            elapsed_seconds,
            excluded: error_count > 0 || request_count <= error_count,
            seed,
        }
    }
}
