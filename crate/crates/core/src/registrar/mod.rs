//! IoT registrar: follows the availability of a domain's providers and
//! keeps privacy-coarsened registrations for the domain's federation
//! brokers in the federation discovery.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use async_trait::async_trait;
use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tokio::task::JoinHandle;

pub use synth::{
    coarsen, reconcile, refresh_due, region_of, synthesize, synthesized_id, ExposeAttributes, KeyField,
    LocationGranularity, PrivacyDirective, Pushed, RegionEntry, Synthesized,
};

use crate::clock::SharedClock;
use crate::error::{parse_body, ApiResult};
use crate::model::wire::{
    Ack, NotifyAvailabilityRequest, RegisterResponse, StatusResponse, SubscribeResponse,
    NOTIFY_AVAILABILITY, REGISTER_CONTEXT, STATUS, SUBSCRIBE_AVAILABILITY,
};
use crate::model::{normalize_endpoint, EntityRef, Registration, Subscription};
use crate::net::{CallError, WireClient};

/// Where synthesized registrations go.
#[async_trait]
pub trait RegistrationSink: Send + Sync {
    async fn push(&self, reg: &Registration) -> Result<(), CallError>;
}

/// Registers over the wire at a discovery.
#[derive(Debug, Clone)]
pub struct HttpSink {
    pub client: WireClient,
    pub endpoint: String,
    pub token: Option<String>,
}

#[async_trait]
impl RegistrationSink for HttpSink {
    async fn push(&self, reg: &Registration) -> Result<(), CallError> {
        self.client
            .post::<_, RegisterResponse>(&self.endpoint, REGISTER_CONTEXT, reg, self.token.as_deref())
            .await
            .map(|_| ())
    }
}

/// Keeps every pushed registration; can be switched to fail.
#[derive(Debug, Default)]
pub struct RecordingSink {
    pushed: parking_lot::Mutex<Vec<Registration>>,
    failing: std::sync::atomic::AtomicBool,
}

impl RecordingSink {
    pub fn pushed(&self) -> Vec<Registration> {
        self.pushed.lock().clone()
    }

    pub fn set_failing(&self, failing: bool) {
        self.failing.store(failing, Ordering::SeqCst);
    }
}

#[async_trait]
impl RegistrationSink for RecordingSink {
    async fn push(&self, reg: &Registration) -> Result<(), CallError> {
        if self.failing.load(Ordering::SeqCst) {
            return Err(CallError::Unreachable("sink down".into()));
        }
        self.pushed.lock().push(reg.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegistrarConfig {
    #[serde(default = "crate::cm::default_listen")]
    pub listen: String,
    /// Federation discovery receiving synthesized registrations.
    pub fed_discovery_endpoint: String,
    /// Intra-domain discovery to follow; providers may also register here
    /// directly.
    #[serde(default)]
    pub id_discovery_endpoint: Option<String>,
    /// Exposed address of the domain's inbound federation broker.
    pub in_fed_broker_endpoint: String,
    /// Callback address for availability notifications. Defaults to the
    /// bound address.
    #[serde(default)]
    pub self_endpoint: Option<String>,
    #[serde(default)]
    pub directives: Vec<PrivacyDirective>,
    /// JSON array of directives; replaces `directives` and is watched for
    /// changes.
    #[serde(default)]
    pub directives_path: Option<PathBuf>,
    #[serde(default)]
    pub region_table: Vec<RegionEntry>,
    #[serde(default)]
    pub region_table_path: Option<PathBuf>,
    #[serde(default = "default_ttl")]
    pub ttl: u64,
    #[serde(default)]
    pub token: Option<String>,
    /// Source providers ignored (the domain's own outbound broker).
    #[serde(default)]
    pub exclude_providers: Vec<String>,
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
}

fn default_ttl() -> u64 {
    300
}

fn default_tick() -> u64 {
    1000
}

impl RegistrarConfig {
    pub fn new(fed_discovery: &str, in_fed_broker: &str) -> Self {
        Self {
            listen: crate::cm::default_listen(),
            fed_discovery_endpoint: fed_discovery.into(),
            id_discovery_endpoint: None,
            in_fed_broker_endpoint: in_fed_broker.into(),
            self_endpoint: None,
            directives: Vec::new(),
            directives_path: None,
            region_table: Vec::new(),
            region_table_path: None,
            ttl: default_ttl(),
            token: None,
            exclude_providers: Vec::new(),
            tick_ms: default_tick(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistrarError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid directive {index}: {reason}")]
    InvalidDirective { index: usize, reason: String },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, RegistrarError> {
    let text = std::fs::read_to_string(path).map_err(|source| RegistrarError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| RegistrarError::Parse {
        path: path.clone(),
        source,
    })
}

pub fn load_directives(path: &PathBuf) -> Result<Vec<PrivacyDirective>, RegistrarError> {
    let directives: Vec<PrivacyDirective> = read_json(path)?;
    validate_directives(&directives)?;
    Ok(directives)
}

fn validate_directives(directives: &[PrivacyDirective]) -> Result<(), RegistrarError> {
    for (index, d) in directives.iter().enumerate() {
        d.validate()
            .map_err(|reason| RegistrarError::InvalidDirective { index, reason })?;
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Pipeline {
    /// registration id -> (source registration, received at)
    sources: BTreeMap<String, (Registration, i64)>,
    pushed: BTreeMap<String, Pushed>,
    /// synthesis key -> registration not yet acknowledged by the sink
    retry: BTreeMap<String, Registration>,
    directives: Vec<PrivacyDirective>,
    directives_stamp: Option<SystemTime>,
}

struct Inner {
    config: RegistrarConfig,
    self_endpoint: String,
    regions: Vec<RegionEntry>,
    exclude: HashSet<String>,
    sink: Arc<dyn RegistrationSink>,
    client: WireClient,
    clock: SharedClock,
    pipeline: Mutex<Pipeline>,
    sink_operations: AtomicU64,
}

#[derive(Clone)]
pub struct Registrar {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Registrar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registrar")
            .field("in_fed_broker", &self.inner.config.in_fed_broker_endpoint)
            .finish()
    }
}

impl Registrar {
    /// Registrar pushing to the configured federation discovery.
    pub fn new(config: &RegistrarConfig, endpoint: &str, client: WireClient, clock: SharedClock) -> Result<Self, RegistrarError> {
        let sink = Arc::new(HttpSink {
            client: client.clone(),
            endpoint: config.fed_discovery_endpoint.clone(),
            token: config.token.clone(),
        });
        Self::with_sink(config, endpoint, client, clock, sink)
    }

    pub fn with_sink(
        config: &RegistrarConfig,
        endpoint: &str,
        client: WireClient,
        clock: SharedClock,
        sink: Arc<dyn RegistrationSink>,
    ) -> Result<Self, RegistrarError> {
        let (directives, stamp) = match &config.directives_path {
            Some(path) => (load_directives(path)?, modified(path)),
            None => {
                validate_directives(&config.directives)?;
                (config.directives.clone(), None)
            }
        };
        let mut regions = config.region_table.clone();
        if let Some(path) = &config.region_table_path {
            regions.extend(read_json::<Vec<RegionEntry>>(path)?);
        }
        Ok(Self {
            inner: Arc::new(Inner {
                self_endpoint: config.self_endpoint.clone().unwrap_or_else(|| endpoint.to_owned()),
                exclude: config.exclude_providers.iter().map(|e| normalize_endpoint(e)).collect(),
                config: config.clone(),
                regions,
                sink,
                client,
                clock,
                pipeline: Mutex::new(Pipeline {
                    directives,
                    directives_stamp: stamp,
                    ..Pipeline::default()
                }),
                sink_operations: AtomicU64::new(0),
            }),
        })
    }

    /// Registrations pushed to the sink so far, retries included.
    pub fn sink_operations(&self) -> u64 {
        self.inner.sink_operations.load(Ordering::SeqCst)
    }

    /// Live synthesized registrations, by synthesis key.
    pub async fn synthesized(&self) -> BTreeMap<String, Registration> {
        self.inner
            .pipeline
            .lock()
            .await
            .pushed
            .iter()
            .filter(|(_, p)| !p.registration.is_tombstone())
            .map(|(k, p)| (k.clone(), p.registration.clone()))
            .collect()
    }

    pub async fn pending_retries(&self) -> usize {
        self.inner.pipeline.lock().await.retry.len()
    }

    /// Take in provider availability and bring the federation discovery up
    /// to date.
    pub async fn ingest(&self, regs: Vec<Registration>) {
        let now = self.inner.clock.now_ms();
        let mut pipeline = self.inner.pipeline.lock().await;
        for reg in regs {
            if self.inner.exclude.contains(&normalize_endpoint(&reg.providing_endpoint)) {
                continue;
            }
            if reg.is_tombstone() {
                pipeline.sources.remove(&reg.registration_id);
            } else {
                let newer = pipeline
                    .sources
                    .get(&reg.registration_id)
                    .is_none_or(|(old, _)| old.version <= reg.version);
                if newer {
                    pipeline.sources.insert(reg.registration_id.clone(), (reg, now));
                }
            }
        }
        self.resynthesize(&mut pipeline, now).await;
    }

    pub async fn set_directives(&self, directives: Vec<PrivacyDirective>) -> Result<(), RegistrarError> {
        validate_directives(&directives)?;
        let now = self.inner.clock.now_ms();
        let mut pipeline = self.inner.pipeline.lock().await;
        pipeline.directives = directives;
        self.resynthesize(&mut pipeline, now).await;
        Ok(())
    }

    async fn resynthesize(&self, pipeline: &mut Pipeline, now: i64) {
        expire_sources(pipeline, now);
        let sources: Vec<Registration> = pipeline.sources.values().map(|(r, _)| r.clone()).collect();
        let target = synthesize(&sources, &pipeline.directives, &self.inner.regions);
        let actions = reconcile(
            &pipeline.pushed,
            &target,
            &self.inner.config.in_fed_broker_endpoint,
            self.inner.config.ttl,
        );
        self.apply(pipeline, actions, now).await;
    }

    async fn apply(&self, pipeline: &mut Pipeline, actions: Vec<(String, Registration)>, now: i64) {
        for (key, registration) in actions {
            pipeline.retry.insert(key.clone(), registration.clone());
            pipeline.pushed.insert(
                key,
                Pushed {
                    registration,
                    pushed_at_ms: now,
                },
            );
        }
        self.flush(pipeline).await;
    }

    /// Push everything not yet acknowledged. Stops at the first transient
    /// failure; the rest waits for the next attempt.
    async fn flush(&self, pipeline: &mut Pipeline) {
        let keys: Vec<String> = pipeline.retry.keys().cloned().collect();
        for key in keys {
            let registration = pipeline.retry[&key].clone();
            self.inner.sink_operations.fetch_add(1, Ordering::SeqCst);
            match self.inner.sink.push(&registration).await {
                Ok(()) => {
                    pipeline.retry.remove(&key);
                }
                Err(e) if e.is_transient() => {
                    tracing::warn!(error = %e, "federation discovery unavailable, will retry");
                    return;
                }
                Err(e) => {
                    tracing::warn!(error = %e, registration = %registration.registration_id, "registration rejected");
                    pipeline.retry.remove(&key);
                }
            }
        }
    }

    /// One maintenance pass: reload changed directives, expire sources,
    /// refresh registrations at half their ttl and retry failed pushes.
    pub async fn tick(&self) {
        let now = self.inner.clock.now_ms();
        let mut pipeline = self.inner.pipeline.lock().await;
        let mut stale = false;
        if let Some(path) = &self.inner.config.directives_path {
            let stamp = modified(path);
            if stamp != pipeline.directives_stamp {
                pipeline.directives_stamp = stamp;
                match load_directives(path) {
                    Ok(directives) => {
                        tracing::info!(count = directives.len(), "directives reloaded");
                        pipeline.directives = directives;
                        stale = true;
                    }
                    Err(e) => tracing::error!(error = %e, "directive reload failed; keeping previous set"),
                }
            }
        }
        // ingest already resynthesizes; only reloads and expiry are new here
        if expire_sources(&mut pipeline, now) || stale {
            self.resynthesize(&mut pipeline, now).await;
        }
        let due = refresh_due(&pipeline.pushed, now);
        self.apply(&mut pipeline, due, now).await;
    }

    async fn subscribe_to_discovery(&self, discovery: &str) -> Result<(), CallError> {
        let sub = Subscription::availability(
            vec![EntityRef::any()],
            Vec::new(),
            self.inner.self_endpoint.clone(),
            u64::from(u32::MAX),
        );
        self.inner
            .client
            .post::<_, SubscribeResponse>(discovery, SUBSCRIBE_AVAILABILITY, &sub, self.inner.config.token.as_deref())
            .await
            .map(|_| ())
    }

    /// Follow the intra-domain discovery (if configured) and run
    /// maintenance passes every tick.
    pub fn spawn(&self) -> JoinHandle<()> {
        let this = self.clone();
        tokio::spawn(async move {
            let tick = Duration::from_millis(this.inner.config.tick_ms.max(10));
            if let Some(discovery) = this.inner.config.id_discovery_endpoint.clone() {
                let mut delay = Duration::from_millis(50);
                while let Err(e) = this.subscribe_to_discovery(&discovery).await {
                    tracing::warn!(error = %e, "availability subscription failed, retrying");
                    tokio::time::sleep(delay).await;
                    delay = (delay * 2).min(Duration::from_secs(5));
                }
            }
            loop {
                tokio::time::sleep(tick).await;
                this.tick().await;
            }
        })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route(REGISTER_CONTEXT, post(register))
            .route(NOTIFY_AVAILABILITY, post(notify_availability))
            .route(STATUS, get(status))
            .with_state(self.clone())
    }
}

/// Drop sources whose ttl ran out; true when any was dropped.
fn expire_sources(pipeline: &mut Pipeline, now: i64) -> bool {
    let before = pipeline.sources.len();
    pipeline
        .sources
        .retain(|_, (reg, at)| now <= *at + reg.ttl as i64 * 1000);
    pipeline.sources.len() != before
}

fn modified(path: &PathBuf) -> Option<SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

async fn register(State(r): State<Registrar>, body: Bytes) -> ApiResult<Json<RegisterResponse>> {
    let mut reg: Registration = parse_body(&body)?;
    reg.validate().map_err(crate::error::ApiError::BadRequest)?;
    if reg.registration_id.is_empty() {
        reg.registration_id = uuid::Uuid::new_v4().to_string();
    }
    let response = RegisterResponse {
        registration_id: reg.registration_id.clone(),
        version: reg.version,
    };
    r.ingest(vec![reg]).await;
    Ok(Json(response))
}

async fn notify_availability(State(r): State<Registrar>, body: Bytes) -> ApiResult<Json<Ack>> {
    let n: NotifyAvailabilityRequest = parse_body(&body)?;
    r.ingest(n.registrations).await;
    Ok(Json(Ack {}))
}

async fn status() -> Json<StatusResponse> {
    Json(StatusResponse {
        service: "registrar".into(),
        ok: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::model::{GeoPoint, Scope};

    fn sensor(id: &str, lat: f64, lon: f64) -> Registration {
        Registration {
            registration_id: format!("src-{id}"),
            version: 1,
            providing_endpoint: "http://cm:1".into(),
            entities: vec![EntityRef::new(id, "Temperature")],
            attribute_names: vec!["value".into()],
            scope: Scope::ExactPoint(GeoPoint::new(lat, lon)),
            ttl: 3600,
        }
    }

    fn registrar(clock: Arc<ManualClock>) -> (Registrar, Arc<RecordingSink>) {
        let mut config = RegistrarConfig::new("http://fed-d:1", "http://in-fed:1");
        config.directives = vec![PrivacyDirective::by_type_and_grid("Temperature", 0.1)];
        config.exclude_providers = vec!["http://out-fed:1".into()];
        let sink = Arc::new(RecordingSink::default());
        let r = Registrar::with_sink(&config, "http://iotr:1", WireClient::new(), clock, sink.clone()).unwrap();
        (r, sink)
    }

    #[tokio::test]
    async fn ingest_pushes_only_changes() {
        let (r, sink) = registrar(ManualClock::starting_at(0));
        r.ingest(vec![sensor("a", 44.101, 9.823)]).await;
        assert_eq!(sink.pushed().len(), 1);
        r.ingest(vec![sensor("b", 44.102, 9.824)]).await;
        assert_eq!(sink.pushed().len(), 1);
        r.ingest(vec![sensor("c", 45.0, 9.0)]).await;
        assert_eq!(sink.pushed().len(), 2);
        assert!(sink.pushed().iter().all(|p| p.providing_endpoint == "http://in-fed:1"));
    }

    #[tokio::test]
    async fn excluded_provider_ignored() {
        let (r, sink) = registrar(ManualClock::starting_at(0));
        let mut catch_all = sensor("x", 1.0, 1.0);
        catch_all.providing_endpoint = "http://out-fed:1/".into();
        r.ingest(vec![catch_all]).await;
        assert!(sink.pushed().is_empty());
    }

    #[tokio::test]
    async fn source_tombstone_withdraws() {
        let (r, sink) = registrar(ManualClock::starting_at(0));
        r.ingest(vec![sensor("a", 44.101, 9.823)]).await;
        let mut gone = sensor("a", 44.101, 9.823);
        gone.version = 2;
        gone.ttl = 0;
        r.ingest(vec![gone]).await;
        let pushed = sink.pushed();
        assert_eq!(pushed.len(), 2);
        assert!(pushed[1].is_tombstone());
        assert!(r.synthesized().await.is_empty());
    }

    #[tokio::test]
    async fn refresh_at_half_ttl() {
        let clock = ManualClock::starting_at(0);
        let (r, sink) = registrar(clock.clone());
        r.ingest(vec![sensor("a", 44.101, 9.823)]).await;
        clock.advance_secs(149);
        r.tick().await;
        assert_eq!(sink.pushed().len(), 1);
        clock.advance_secs(1);
        r.tick().await;
        let pushed = sink.pushed();
        assert_eq!(pushed.len(), 2);
        assert_eq!(pushed[1].version, 2);
    }

    #[tokio::test]
    async fn retries_after_sink_failure() {
        let (r, sink) = registrar(ManualClock::starting_at(0));
        sink.set_failing(true);
        r.ingest(vec![sensor("a", 44.101, 9.823)]).await;
        assert_eq!(r.pending_retries().await, 1);
        assert_eq!(r.synthesized().await.len(), 1);
        sink.set_failing(false);
        r.tick().await;
        assert_eq!(r.pending_retries().await, 0);
        assert_eq!(sink.pushed().len(), 1);
    }

    #[tokio::test]
    async fn directive_change_resynthesizes() {
        let (r, sink) = registrar(ManualClock::starting_at(0));
        r.ingest(vec![sensor("a", 44.101, 9.823)]).await;
        r.set_directives(vec![]).await.unwrap();
        assert!(sink.pushed().last().unwrap().is_tombstone());
        let bad = PrivacyDirective::by_type_and_grid("*", -1.0);
        assert!(r.set_directives(vec![bad]).await.is_err());
    }
}
