//! Context manager: stores and indexes context published by producers and
//! serves queries and subscriptions over it.

mod announce;
mod store;

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::{Notify, Semaphore};
use tokio::task::JoinHandle;

pub use announce::{availability_registrations, AnnounceMode, Announcer, AvailabilityItem};
pub use store::{ContextStore, PendingNotification, PublishOutcome, StoreError, LOCATION_ATTRIBUTE};

use crate::clock::SharedClock;
use crate::error::{parse_body, ApiError, ApiResult};
use crate::model::wire::{
    Ack, NotifyContextRequest, StatusResponse, SubscribeResponse, UnsubscribeRequest,
    UpdateContextRequest, NOTIFY_CONTEXT, QUERY_CONTEXT, STATUS, SUBSCRIBE_CONTEXT,
    UNSUBSCRIBE_CONTEXT, UPDATE_CONTEXT,
};
use crate::model::{ContextElement, QueryRequest, QueryResponse, Subscription};
use crate::net::WireClient;
use crate::notify::Notifier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CmConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Address other components should use to reach this CM (its PEP,
    /// when secured). Defaults to the bound address.
    #[serde(default)]
    pub advertised_endpoint: Option<String>,
    #[serde(default)]
    pub snapshot_path: Option<PathBuf>,
    /// Where availability registrations are sent (a discovery or the
    /// IoT registrar).
    #[serde(default)]
    pub announce_targets: Vec<String>,
    #[serde(default)]
    pub announce_mode: AnnounceMode,
    #[serde(default = "default_announce_ttl")]
    pub announce_ttl: u64,
    /// Credential attached to outgoing notifications and announcements.
    #[serde(default)]
    pub token: Option<String>,
    /// Artificial service time added to every query.
    #[serde(default)]
    pub service_delay_ms: u64,
    /// Queries processed at once; 0 means unbounded.
    #[serde(default)]
    pub service_concurrency: usize,
}

pub(crate) fn default_listen() -> String {
    "127.0.0.1:0".into()
}

fn default_announce_ttl() -> u64 {
    3600
}

impl Default for CmConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            advertised_endpoint: None,
            snapshot_path: None,
            announce_targets: Vec::new(),
            announce_mode: AnnounceMode::default(),
            announce_ttl: default_announce_ttl(),
            token: None,
            service_delay_ms: 0,
            service_concurrency: 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct CmStats {
    pub publishes: AtomicU64,
    pub queries: AtomicU64,
}

struct Inner {
    store: RwLock<ContextStore>,
    clock: SharedClock,
    notifier: Notifier,
    token: Option<String>,
    snapshot: Option<Mutex<std::fs::File>>,
    limiter: Option<Semaphore>,
    delay: Duration,
    announcer: Option<Announcer>,
    announce_dirty: AtomicBool,
    announce_wake: Notify,
    stats: CmStats,
}

/// Cheap-to-clone handle on a context manager instance.
#[derive(Clone)]
pub struct ContextManager {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for ContextManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContextManager")
            .field("entities", &self.inner.store.read().len())
            .finish()
    }
}

impl ContextManager {
    /// Build a CM. `endpoint` is the bound address, used when no advertised
    /// endpoint is configured. Replays the snapshot file if one exists.
    pub fn new(
        config: &CmConfig,
        endpoint: &str,
        client: WireClient,
        clock: SharedClock,
    ) -> std::io::Result<Self> {
        let mut store = ContextStore::new();
        let snapshot = match &config.snapshot_path {
            Some(path) => {
                if path.exists() {
                    let file = std::fs::File::open(path)?;
                    for line in std::io::BufReader::new(file).lines() {
                        let line = line?;
                        if line.trim().is_empty() {
                            continue;
                        }
                        let batch: UpdateContextRequest = serde_json::from_str(&line)
                            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                        store
                            .publish(&batch.context_elements, clock.now_ms())
                            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                    }
                }
                let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
                Some(Mutex::new(file))
            }
            None => None,
        };
        let advertised = config
            .advertised_endpoint
            .clone()
            .unwrap_or_else(|| endpoint.to_owned());
        let announcer = (!config.announce_targets.is_empty()).then(|| {
            Announcer::new(
                config.announce_targets.clone(),
                advertised,
                config.announce_mode,
                config.announce_ttl,
                config.token.clone(),
                client.clone(),
                clock.clone(),
            )
        });
        let has_data = !store.is_empty();
        Ok(Self {
            inner: Arc::new(Inner {
                store: RwLock::new(store),
                clock,
                notifier: Notifier::new(client),
                token: config.token.clone(),
                snapshot,
                limiter: (config.service_concurrency > 0)
                    .then(|| Semaphore::new(config.service_concurrency)),
                delay: Duration::from_millis(config.service_delay_ms),
                announcer,
                announce_dirty: AtomicBool::new(has_data),
                announce_wake: Notify::new(),
                stats: CmStats::default(),
            }),
        })
    }

    pub fn stats(&self) -> &CmStats {
        &self.inner.stats
    }

    pub fn notifier(&self) -> &Notifier {
        &self.inner.notifier
    }

    pub fn entity_count(&self) -> usize {
        self.inner.store.read().len()
    }

    pub fn publish(&self, mut batch: Vec<ContextElement>) -> Result<(), StoreError> {
        let now = self.inner.clock.now_ms();
        for attr in batch.iter_mut().flat_map(|e| e.attributes.iter_mut()) {
            if attr.timestamp == 0 {
                attr.timestamp = now;
            }
        }
        let outcome = {
            let mut store = self.inner.store.write();
            let outcome = store.publish(&batch, now)?;
            if let Some(file) = &self.inner.snapshot {
                let line = serde_json::to_string(&UpdateContextRequest {
                    context_elements: batch,
                })
                .expect("serializable batch");
                let mut file = file.lock();
                if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                    tracing::error!(error = %e, "snapshot append failed");
                }
            }
            outcome
        };
        self.inner.stats.publishes.fetch_add(1, Ordering::Relaxed);
        for pending in outcome.notifications {
            self.notify(&pending.subscription, pending.elements);
        }
        if outcome.availability_changed && self.inner.announcer.is_some() {
            self.inner.announce_dirty.store(true, Ordering::SeqCst);
            self.inner.announce_wake.notify_one();
        }
        Ok(())
    }

    fn notify(&self, sub: &Subscription, elements: Vec<ContextElement>) {
        self.inner.notifier.dispatch(
            sub.callback_endpoint.clone(),
            NOTIFY_CONTEXT,
            &NotifyContextRequest {
                subscription_id: sub.subscription_id.clone(),
                context_elements: elements,
            },
            self.inner.token.clone(),
        );
    }

    /// Answer a query, honouring the configured service delay and
    /// concurrency limit.
    pub async fn query(&self, q: &QueryRequest) -> QueryResponse {
        let _permit = match &self.inner.limiter {
            Some(limiter) => Some(limiter.acquire().await.expect("limiter never closed")),
            None => None,
        };
        if !self.inner.delay.is_zero() {
            tokio::time::sleep(self.inner.delay).await;
        }
        self.inner.stats.queries.fetch_add(1, Ordering::Relaxed);
        QueryResponse::of(self.inner.store.read().query(q))
    }

    pub fn subscribe(&self, sub: Subscription) -> Result<String, StoreError> {
        let now = self.inner.clock.now_ms();
        let (sub, initial) = self.inner.store.write().subscribe(sub, now)?;
        if !initial.is_empty() {
            self.notify(&sub, initial);
        }
        Ok(sub.subscription_id)
    }

    pub fn unsubscribe(&self, subscription_id: &str) -> Result<(), StoreError> {
        self.inner.store.write().unsubscribe(subscription_id)
    }

    /// Synchronously push availability registrations to the targets.
    pub async fn announce_now(&self) -> bool {
        let Some(announcer) = &self.inner.announcer else {
            return true;
        };
        self.inner.announce_dirty.store(false, Ordering::SeqCst);
        let items = self.inner.store.read().availability_items();
        let ok = announcer.sync(&items, false).await;
        if !ok {
            self.inner.announce_dirty.store(true, Ordering::SeqCst);
        }
        ok
    }

    pub async fn announced(&self) -> Vec<crate::model::Registration> {
        match &self.inner.announcer {
            Some(a) => a.announced().await,
            None => Vec::new(),
        }
    }

    /// Background loop keeping announcements current and refreshed.
    pub fn spawn_announcer(&self) -> Option<JoinHandle<()>> {
        self.inner.announcer.as_ref()?;
        let this = self.clone();
        Some(tokio::spawn(async move {
            let announcer = this.inner.announcer.as_ref().expect("checked above");
            loop {
                let check = Duration::from_millis((announcer.refresh_interval_ms() as u64 / 4).clamp(50, 5000));
                tokio::select! {
                    _ = this.inner.announce_wake.notified() => {}
                    _ = tokio::time::sleep(check) => {}
                }
                let force = announcer.refresh_due().await;
                let dirty = this.inner.announce_dirty.swap(false, Ordering::SeqCst);
                if !dirty && !force {
                    continue;
                }
                let items = this.inner.store.read().availability_items();
                if !announcer.sync(&items, force).await {
                    this.inner.announce_dirty.store(true, Ordering::SeqCst);
                    tokio::time::sleep(Duration::from_secs(1)).await;
                }
            }
        }))
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route(UPDATE_CONTEXT, post(update_context))
            .route(QUERY_CONTEXT, post(query_context))
            .route(SUBSCRIBE_CONTEXT, post(subscribe_context))
            .route(UNSUBSCRIBE_CONTEXT, post(unsubscribe_context))
            .route(STATUS, get(status))
            .with_state(self.clone())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::MalformedElement(_)
            | StoreError::InvalidSubscription(_)
            | StoreError::InvalidCallback(_) => ApiError::BadRequest(e.to_string()),
            StoreError::UnknownSubscription(_) => ApiError::NotFound(e.to_string()),
            StoreError::DuplicateSubscription(_) => ApiError::Conflict(e.to_string()),
        }
    }
}

async fn update_context(State(cm): State<ContextManager>, body: Bytes) -> ApiResult<Json<Ack>> {
    let request: UpdateContextRequest = parse_body(&body)?;
    cm.publish(request.context_elements)?;
    Ok(Json(Ack {}))
}

async fn query_context(
    State(cm): State<ContextManager>,
    body: Bytes,
) -> ApiResult<Json<QueryResponse>> {
    let q: QueryRequest = parse_body(&body)?;
    Ok(Json(cm.query(&q).await))
}

async fn subscribe_context(
    State(cm): State<ContextManager>,
    body: Bytes,
) -> ApiResult<Json<SubscribeResponse>> {
    let sub: Subscription = parse_body(&body)?;
    let subscription_id = cm.subscribe(sub)?;
    Ok(Json(SubscribeResponse { subscription_id }))
}

async fn unsubscribe_context(
    State(cm): State<ContextManager>,
    body: Bytes,
) -> ApiResult<Json<Ack>> {
    let request: UnsubscribeRequest = parse_body(&body)?;
    cm.unsubscribe(&request.subscription_id)?;
    Ok(Json(Ack {}))
}

async fn status() -> Json<StatusResponse> {
    Json(StatusResponse {
        service: "context-manager".into(),
        ok: true,
    })
}
