//! Discovery: registry of provider availability. The same service plays the
//! intra-domain and federation roles; the latter just has replication peers.

mod store;

use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

pub use store::{Accepted, RegistrationStore, RegistryError, StoredRegistration};

use crate::clock::SharedClock;
use crate::error::{parse_body, ApiError, ApiResult};
use crate::model::wire::{
    Ack, DiscoverResponse, NotifyAvailabilityRequest, RegisterResponse, StatusResponse,
    SubscribeResponse, UnsubscribeRequest, DISCOVER_AVAILABILITY, NOTIFY_AVAILABILITY,
    REGISTER_CONTEXT, REPLICATE, STATUS, SUBSCRIBE_AVAILABILITY, UNSUBSCRIBE_AVAILABILITY,
};
use crate::model::{QueryRequest, Registration, Subscription};
use crate::net::WireClient;
use crate::notify::Notifier;
use crate::replication::{ReplicationKind, ReplicationOp, Replicator, SeenOps};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DiscoveryConfig {
    #[serde(default = "crate::cm::default_listen")]
    pub listen: String,
    /// Label used as the origin of locally accepted writes.
    #[serde(default)]
    pub origin: String,
    /// Base URLs of the other replicas.
    #[serde(default)]
    pub peers: Vec<String>,
    /// Credential attached to availability notifications.
    #[serde(default)]
    pub token: Option<String>,
    /// Sweep period; 0 derives it from the shortest stored ttl.
    #[serde(default)]
    pub sweep_interval_ms: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            listen: crate::cm::default_listen(),
            origin: String::new(),
            peers: Vec::new(),
            token: None,
            sweep_interval_ms: 0,
        }
    }
}

struct Inner {
    store: Mutex<RegistrationStore>,
    seen: Mutex<SeenOps>,
    origin: String,
    token: RwLock<Option<String>>,
    sweep_interval_ms: u64,
    replicator: Option<Replicator>,
    notifier: Notifier,
    clock: SharedClock,
}

#[derive(Clone)]
pub struct Discovery {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Discovery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discovery")
            .field("origin", &self.inner.origin)
            .field("registrations", &self.inner.store.lock().len())
            .finish()
    }
}

impl Discovery {
    pub fn new(config: &DiscoveryConfig, client: WireClient, clock: SharedClock) -> Self {
        let replicator =
            (!config.peers.is_empty()).then(|| Replicator::new(config.peers.clone(), client.clone()));
        Self {
            inner: Arc::new(Inner {
                store: Mutex::new(RegistrationStore::new()),
                seen: Mutex::new(SeenOps::default()),
                origin: config.origin.clone(),
                token: RwLock::new(config.token.clone()),
                sweep_interval_ms: config.sweep_interval_ms,
                replicator,
                notifier: Notifier::new(client),
                clock,
            }),
        }
    }

    /// Replace the credential attached to availability notifications.
    pub fn set_token(&self, token: Option<String>) {
        *self.inner.token.write() = token;
    }

    pub fn replicator(&self) -> Option<&Replicator> {
        self.inner.replicator.as_ref()
    }

    pub fn notifier(&self) -> &Notifier {
        &self.inner.notifier
    }

    pub fn register(&self, reg: Registration) -> Result<RegisterResponse, RegistryError> {
        let now = self.inner.clock.now_ms();
        let accepted = self.inner.store.lock().register(reg, now, &self.inner.origin)?;
        self.inner.seen.lock().first_time(&accepted.stored.op_id);
        if let Some(replicator) = &self.inner.replicator {
            let mut op = ReplicationOp::new(
                ReplicationKind::Registration,
                serde_json::to_value(&accepted.stored).expect("serializable registration"),
                &self.inner.origin,
                accepted.stored.registration.version,
                now,
            );
            op.op_id = accepted.stored.op_id.clone();
            replicator.broadcast(&op);
        }
        let response = RegisterResponse {
            registration_id: accepted.stored.registration.registration_id.clone(),
            version: accepted.stored.registration.version,
        };
        self.notify_all(&accepted);
        Ok(response)
    }

    /// Apply an op received from a peer. Returns false for duplicates and
    /// for writes that lose to the stored state.
    pub fn apply(&self, op: &ReplicationOp) -> Result<bool, ApiError> {
        if op.kind != ReplicationKind::Registration {
            return Err(ApiError::BadRequest("unsupported op kind".into()));
        }
        if !self.inner.seen.lock().first_time(&op.op_id) {
            return Ok(false);
        }
        let mut stored: StoredRegistration = serde_json::from_value(op.payload.clone())
            .map_err(|e| ApiError::BadRequest(e.to_string()))?;
        stored.op_id = op.op_id.clone();
        let now = self.inner.clock.now_ms();
        let accepted = self.inner.store.lock().apply_replicated(stored, now);
        match accepted {
            Some(accepted) => {
                self.notify_all(&accepted);
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn notify_all(&self, accepted: &Accepted) {
        for sub in &accepted.subscribers {
            self.inner.notifier.dispatch(
                sub.callback_endpoint.clone(),
                NOTIFY_AVAILABILITY,
                &NotifyAvailabilityRequest {
                    subscription_id: sub.subscription_id.clone(),
                    registrations: vec![accepted.stored.registration.clone()],
                },
                self.inner.token.read().clone(),
            );
        }
    }

    pub fn discover(&self, q: &QueryRequest) -> Vec<Registration> {
        self.inner.store.lock().discover(q, self.inner.clock.now_ms())
    }

    pub fn live(&self) -> Vec<Registration> {
        self.inner.store.lock().live(self.inner.clock.now_ms())
    }

    pub fn subscribe(&self, sub: Subscription) -> Result<String, RegistryError> {
        let now = self.inner.clock.now_ms();
        let (sub, current) = self.inner.store.lock().subscribe(sub, now)?;
        if !current.is_empty() {
            self.inner.notifier.dispatch(
                sub.callback_endpoint.clone(),
                NOTIFY_AVAILABILITY,
                &NotifyAvailabilityRequest {
                    subscription_id: sub.subscription_id.clone(),
                    registrations: current,
                },
                self.inner.token.read().clone(),
            );
        }
        Ok(sub.subscription_id)
    }

    pub fn unsubscribe(&self, subscription_id: &str) -> Result<(), RegistryError> {
        self.inner.store.lock().unsubscribe(subscription_id)
    }

    pub fn sweep(&self) -> usize {
        self.inner.store.lock().sweep(self.inner.clock.now_ms())
    }

    /// Periodic expiry sweep, every quarter of the shortest stored ttl.
    pub fn spawn_sweeper(&self) -> JoinHandle<()> {
        let this = self.clone();
        tokio::spawn(async move {
            loop {
                let period_ms = if this.inner.sweep_interval_ms > 0 {
                    this.inner.sweep_interval_ms
                } else {
                    let min_ttl = this.inner.store.lock().min_ttl().unwrap_or(60);
                    (min_ttl * 1000 / 4).clamp(100, 60_000)
                };
                tokio::time::sleep(Duration::from_millis(period_ms)).await;
                let removed = this.sweep();
                if removed > 0 {
                    tracing::debug!(removed, "expired registrations swept");
                }
            }
        })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route(REGISTER_CONTEXT, post(register))
            .route(DISCOVER_AVAILABILITY, post(discover))
            .route(SUBSCRIBE_AVAILABILITY, post(subscribe))
            .route(UNSUBSCRIBE_AVAILABILITY, post(unsubscribe))
            .route(REPLICATE, post(replicate))
            .route(STATUS, get(status))
            .with_state(self.clone())
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::InvalidRegistration(_)
            | RegistryError::InvalidSubscription(_)
            | RegistryError::InvalidCallback(_) => ApiError::BadRequest(e.to_string()),
            RegistryError::StaleVersion { .. } | RegistryError::DuplicateSubscription(_) => {
                ApiError::Conflict(e.to_string())
            }
            RegistryError::UnknownSubscription(_) => ApiError::NotFound(e.to_string()),
        }
    }
}

async fn register(State(d): State<Discovery>, body: Bytes) -> ApiResult<Json<RegisterResponse>> {
    let reg: Registration = parse_body(&body)?;
    Ok(Json(d.register(reg)?))
}

async fn discover(State(d): State<Discovery>, body: Bytes) -> ApiResult<Json<DiscoverResponse>> {
    let q: QueryRequest = parse_body(&body)?;
    Ok(Json(DiscoverResponse {
        registrations: d.discover(&q),
    }))
}

async fn subscribe(State(d): State<Discovery>, body: Bytes) -> ApiResult<Json<SubscribeResponse>> {
    let sub: Subscription = parse_body(&body)?;
    Ok(Json(SubscribeResponse {
        subscription_id: d.subscribe(sub)?,
    }))
}

async fn unsubscribe(State(d): State<Discovery>, body: Bytes) -> ApiResult<Json<Ack>> {
    let request: UnsubscribeRequest = parse_body(&body)?;
    d.unsubscribe(&request.subscription_id)?;
    Ok(Json(Ack {}))
}

async fn replicate(State(d): State<Discovery>, body: Bytes) -> ApiResult<Json<Ack>> {
    let op: ReplicationOp = parse_body(&body)?;
    d.apply(&op)?;
    Ok(Json(Ack {}))
}

async fn status() -> Json<StatusResponse> {
    Json(StatusResponse {
        service: "discovery".into(),
        ok: true,
    })
}
