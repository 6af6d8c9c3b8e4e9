use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use liots_core::model::{EntityRef, QueryRequest, QueryResponse};

use crate::data::{attribute_name, entity_id, SeedData, ENTITY_TYPE};
use crate::metrics::RunMetrics;
use crate::topology::RunningTopology;
use crate::workload::{EntitiesPerQuery, WorkloadSpec};

/// Seed of client `index`'s generator.
pub fn client_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Query generator of one client. The sequence depends only on the
/// workload seed and the client index.
pub struct QueryStream {
    rng: ChaCha8Rng,
    total: usize,
    attributes: usize,
    per_query: usize,
    entities: EntitiesPerQuery,
}

impl QueryStream {
    pub fn new(spec: &WorkloadSpec, index: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(client_seed(spec.seed, index)),
            total: spec.total_entities,
            attributes: spec.attributes_per_entity,
            per_query: spec.attributes_per_query,
            entities: spec.entities_per_query(),
        }
    }

    pub fn next_query(&mut self) -> QueryRequest {
        let n = match self.entities {
            EntitiesPerQuery::Uniform { max } => self.rng.gen_range(1..=max),
            EntitiesPerQuery::Fixed { count } => count,
        };
        let mut ids: Vec<usize> = sample(&mut self.rng, self.total, n).into_vec();
        ids.sort_unstable();
        let mut attrs: Vec<usize> = sample(&mut self.rng, self.attributes, self.per_query).into_vec();
        attrs.sort_unstable();
        QueryRequest::new(
            ids.into_iter().map(|i| EntityRef::new(entity_id(i), ENTITY_TYPE)).collect(),
            attrs.into_iter().map(attribute_name).collect(),
        )
    }
}

/// Whether a response answers `q` completely: one element per queried
/// entity carrying exactly the queried attributes.
pub fn response_is_complete(q: &QueryRequest, r: &QueryResponse) -> bool {
    if r.context_elements.len() != q.entities.len() || !r.annotations.is_empty() {
        return false;
    }
    r.context_elements.iter().all(|e| {
        q.entities.iter().any(|w| w.id == e.entity.id)
            && e.attributes.len() == q.attribute_names.len()
            && e.attributes.iter().all(|a| q.attribute_names.contains(&a.name))
    })
}

#[derive(Debug, Default)]
struct ClientTally {
    requests: u64,
    errors: u64,
    entities: u64,
    latencies_ms: Vec<f64>,
}

async fn client_loop(
    topology: Arc<RunningTopology>,
    spec: Arc<WorkloadSpec>,
    data: Arc<SeedData>,
    index: usize,
    measure_from: Instant,
    measure_until: Instant,
) -> (ClientTally, Instant) {
    let mut stream = QueryStream::new(&spec, index);
    let mut checker = ChaCha8Rng::seed_from_u64(client_seed(spec.seed, index) ^ 0xc0ffee);
    let mut tally = ClientTally::default();
    let limit = spec.requests_per_client;
    loop {
        let now = Instant::now();
        let measuring = now >= measure_from;
        if limit.is_none() && now >= measure_until {
            break;
        }
        if measuring && limit.is_some_and(|l| tally.requests >= l) {
            break;
        }
        let q = stream.next_query();
        let started = Instant::now();
        let outcome = topology.query(&q).await;
        let latency = started.elapsed();
        if !measuring {
            continue;
        }
        tally.requests += 1;
        let ok = match &outcome {
            Ok(r) => {
                response_is_complete(&q, r)
                    && (!checker.gen_bool(spec.check_fraction) || r.context_elements.iter().all(|e| data.agrees_with(e)))
            }
            Err(_) => false,
        };
        if ok {
            tally.entities += outcome.map_or(0, |r| r.context_elements.len() as u64);
            tally.latencies_ms.push(latency.as_secs_f64() * 1000.0);
        } else {
            tally.errors += 1;
        }
    }
    (tally, Instant::now())
}

/// Run `spec.clients` concurrent query loops against a seeded topology.
/// Per-client tallies are merged only after every client has finished.
pub async fn run_workload(topology: Arc<RunningTopology>, spec: &WorkloadSpec, data: Arc<SeedData>) -> RunMetrics {
    let spec = Arc::new(spec.clone());
    let measure_from = Instant::now() + Duration::from_secs_f64(spec.warmup_seconds.max(0.0));
    let measure_until = measure_from + Duration::from_secs_f64(spec.duration_seconds.max(0.0));
    let tasks: Vec<_> = (0..spec.clients)
        .map(|i| {
            tokio::spawn(client_loop(
                topology.clone(),
                spec.clone(),
                data.clone(),
                i,
                measure_from,
                measure_until,
            ))
        })
        .collect();
    let mut merged = ClientTally::default();
    let mut finished = measure_from;
    for t in futures::future::join_all(tasks).await {
        let (tally, end) = t.expect("client loop panicked");
        merged.requests += tally.requests;
        merged.errors += tally.errors;
        merged.entities += tally.entities;
        merged.latencies_ms.extend(tally.latencies_ms);
        finished = finished.max(end);
    }
    let elapsed = finished.saturating_duration_since(measure_from).as_secs_f64();
    RunMetrics::from_parts(
        &topology.topology.label(),
        merged.requests,
        merged.errors,
        &merged.latencies_ms,
        merged.entities,
        elapsed,
        spec.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Topology;
    use liots_core::model::ContextElement;

    #[test]
    fn same_seed_same_sequence_per_client() {
        let spec = WorkloadSpec::new(Topology::Centralized, 500);
        let take = |i| {
            let mut s = QueryStream::new(&spec, i);
            (0..20).map(|_| s.next_query()).collect::<Vec<_>>()
        };
        assert_eq!(take(3), take(3));
        assert_ne!(take(3), take(4));
    }

    #[test]
    fn queries_respect_the_workload_shape() {
        let mut spec = WorkloadSpec::new(Topology::Centralized, 50);
        spec.entities_per_query = Some(EntitiesPerQuery::Fixed { count: 7 });
        let mut s = QueryStream::new(&spec, 0);
        for _ in 0..50 {
            let q = s.next_query();
            assert_eq!(q.entities.len(), 7);
            assert_eq!(q.attribute_names.len(), 20);
            let mut ids: Vec<_> = q.entities.iter().map(|e| &e.id).collect();
            ids.dedup();
            assert_eq!(ids.len(), 7);
        }
    }

    #[test]
    fn incomplete_responses_are_errors() {
        let data = SeedData::generate(1, 10, 5);
        let q = QueryRequest::new(vec![EntityRef::new("e-1", ENTITY_TYPE)], vec!["a0".into(), "a3".into()]);
        let full = liots_core::model::filter_attributes(&data.elements[1], &q.attribute_names);
        assert!(response_is_complete(&q, &QueryResponse::of(vec![full.clone()])));
        let mut short: ContextElement = full;
        short.attributes.pop();
        assert!(!response_is_complete(&q, &QueryResponse::of(vec![short])));
        assert!(!response_is_complete(&q, &QueryResponse::of(vec![])));
    }
}
