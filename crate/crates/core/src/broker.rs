//! Broker: discovers providers for a request and dispatches it to them.
//! One implementation serves the intra-domain role and both federation
//! boundary roles; the role only changes which credential goes where.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use futures::future::join_all;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::clock::SharedClock;
use crate::error::{parse_body, ApiError, ApiResult};
use crate::model::wire::{
    Ack, DiscoverResponse, NotifyAvailabilityRequest, NotifyContextRequest, StatusResponse,
    SubscribeResponse, UnsubscribeRequest, DISCOVER_AVAILABILITY, NOTIFY_AVAILABILITY,
    NOTIFY_CONTEXT, QUERY_CONTEXT, STATUS, SUBSCRIBE_AVAILABILITY, SUBSCRIBE_CONTEXT,
    UNSUBSCRIBE_AVAILABILITY, UNSUBSCRIBE_CONTEXT,
};
use crate::model::{
    aggregate_responses, filter_attributes, is_valid_endpoint, match_entity, normalize_endpoint,
    AggregateMode, Annotation, ContextElement, QueryRequest, QueryResponse, Registration,
    Subscription, SubscriptionKind,
};
use crate::net::{CallError, WireClient};
use crate::notify::Notifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrokerRole {
    #[default]
    Intra,
    InFed,
    OutFed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BrokerConfig {
    #[serde(default = "crate::cm::default_listen")]
    pub listen: String,
    #[serde(default)]
    pub role: BrokerRole,
    pub discovery_endpoint: String,
    /// Callback address handed to providers. Defaults to the bound address.
    #[serde(default)]
    pub self_endpoint: Option<String>,
    /// Callback address handed to the discovery; defaults to `self_endpoint`.
    #[serde(default)]
    pub availability_callback: Option<String>,
    #[serde(default = "default_fanout_timeout")]
    pub fanout_timeout_ms: u64,
    #[serde(default = "default_fanout_concurrency")]
    pub fanout_concurrency: usize,
    /// Credential of this broker in its own domain's scope.
    #[serde(default)]
    pub token: Option<String>,
    /// Credential of this broker's domain in the federation scope.
    #[serde(default)]
    pub outbound_token: Option<String>,
    /// Provider endpoints never contacted (the paired boundary broker).
    #[serde(default)]
    pub exclude_providers: Vec<String>,
}

fn default_fanout_timeout() -> u64 {
    5000
}

fn default_fanout_concurrency() -> usize {
    32
}

impl BrokerConfig {
    pub fn new(role: BrokerRole, discovery_endpoint: impl Into<String>) -> Self {
        Self {
            listen: crate::cm::default_listen(),
            role,
            discovery_endpoint: discovery_endpoint.into(),
            self_endpoint: None,
            availability_callback: None,
            fanout_timeout_ms: default_fanout_timeout(),
            fanout_concurrency: default_fanout_concurrency(),
            token: None,
            outbound_token: None,
            exclude_providers: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.fanout_timeout_ms == 0 {
            return Err("fanoutTimeout must be positive".into());
        }
        if !is_valid_endpoint(&self.discovery_endpoint) {
            return Err(format!("invalid discovery endpoint {:?}", self.discovery_endpoint));
        }
        Ok(())
    }

    /// Credential for calls to providers.
    pub fn provider_token(&self) -> Option<&str> {
        match self.role {
            BrokerRole::OutFed => self.outbound_token.as_deref(),
            _ => self.token.as_deref(),
        }
    }

    /// Credential for notifications forwarded to the requester. Intra
    /// brokers answer applications, which must not receive the broker's
    /// own credential.
    pub fn requester_token(&self) -> Option<&str> {
        match self.role {
            BrokerRole::InFed => self.outbound_token.as_deref(),
            BrokerRole::OutFed => self.token.as_deref(),
            BrokerRole::Intra => None,
        }
    }
}

/// Distinct provider endpoints from a discovery answer, in first-seen
/// order, skipping tombstones and excluded endpoints.
pub fn select_providers(regs: &[Registration], exclude: &HashSet<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for reg in regs {
        if reg.is_tombstone() {
            continue;
        }
        let key = normalize_endpoint(&reg.providing_endpoint);
        if exclude.contains(&key) || !seen.insert(key) {
            continue;
        }
        out.push(reg.providing_endpoint.clone());
    }
    out
}

/// Restrict a provider notification to what the inbound subscription asked
/// for; elements left without attributes are dropped.
pub fn refine_notification(inbound: &Subscription, elements: Vec<ContextElement>) -> Vec<ContextElement> {
    elements
        .into_iter()
        .filter(|e| inbound.entities.iter().any(|p| match_entity(p, &e.entity)))
        .map(|e| filter_attributes(&e, &inbound.attribute_names))
        .filter(|e| !e.attributes.is_empty())
        .collect()
}

#[derive(Debug)]
struct SubscriptionState {
    inbound: Subscription,
    created_at_ms: i64,
    availability_sub_id: String,
    /// normalized provider endpoint -> (endpoint as registered, provider subscription id)
    provider_subs: BTreeMap<String, (String, String)>,
}

#[derive(Debug, Default)]
pub struct BrokerStats {
    pub queries: AtomicU64,
    pub provider_calls: AtomicU64,
    pub forwarded_notifications: AtomicU64,
}

#[derive(Default)]
struct Routing {
    states: HashMap<String, Arc<tokio::sync::Mutex<SubscriptionState>>>,
    by_availability: HashMap<String, String>,
    by_provider: HashMap<String, String>,
}

struct Inner {
    config: BrokerConfig,
    self_endpoint: String,
    availability_callback: String,
    exclude: HashSet<String>,
    client: WireClient,
    notifier: Notifier,
    clock: SharedClock,
    fanout: Arc<Semaphore>,
    routing: Mutex<Routing>,
    stats: BrokerStats,
}

#[derive(Clone)]
pub struct Broker {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("role", &self.inner.config.role)
            .field("self_endpoint", &self.inner.self_endpoint)
            .finish()
    }
}

impl Broker {
    /// `endpoint` is the bound address, used when the config names no
    /// callback address.
    pub fn new(config: &BrokerConfig, endpoint: &str, client: WireClient, clock: SharedClock) -> Self {
        let self_endpoint = config.self_endpoint.clone().unwrap_or_else(|| endpoint.to_owned());
        let availability_callback = config
            .availability_callback
            .clone()
            .unwrap_or_else(|| self_endpoint.clone());
        Self {
            inner: Arc::new(Inner {
                exclude: config.exclude_providers.iter().map(|e| normalize_endpoint(e)).collect(),
                fanout: Arc::new(Semaphore::new(config.fanout_concurrency.max(1))),
                notifier: Notifier::new(client.clone()),
                config: config.clone(),
                self_endpoint,
                availability_callback,
                client,
                clock,
                routing: Mutex::new(Routing::default()),
                stats: BrokerStats::default(),
            }),
        }
    }

    pub fn stats(&self) -> &BrokerStats {
        &self.inner.stats
    }

    pub fn notifier(&self) -> &Notifier {
        &self.inner.notifier
    }

    pub fn active_subscriptions(&self) -> usize {
        self.inner.routing.lock().states.len()
    }

    async fn discover(&self, q: &QueryRequest) -> Result<Vec<Registration>, ApiError> {
        let cfg = &self.inner.config;
        self.inner
            .client
            .post_with_timeout::<_, DiscoverResponse>(
                &cfg.discovery_endpoint,
                DISCOVER_AVAILABILITY,
                q,
                cfg.token.as_deref(),
                Some(Duration::from_millis(cfg.fanout_timeout_ms)),
            )
            .await
            .map(|r| r.registrations)
            .map_err(|e| {
                tracing::warn!(error = %e, "discovery call failed");
                ApiError::BadGateway("discovery unreachable".into())
            })
    }

    pub async fn query(&self, q: &QueryRequest) -> ApiResult<QueryResponse> {
        self.inner.stats.queries.fetch_add(1, Ordering::Relaxed);
        let regs = self.discover(q).await?;
        let providers = select_providers(&regs, &self.inner.exclude);
        if providers.is_empty() {
            return Ok(QueryResponse::default());
        }
        let cfg = &self.inner.config;
        let deadline = tokio::time::Instant::now() + Duration::from_millis(cfg.fanout_timeout_ms);
        let provider_query = QueryRequest {
            aggregate: AggregateMode::Set,
            ..q.clone()
        };
        let calls = providers.iter().map(|endpoint| {
            let provider_query = &provider_query;
            async move {
                let call = async {
                    let _permit = self.inner.fanout.acquire().await.expect("semaphore open");
                    self.inner.stats.provider_calls.fetch_add(1, Ordering::Relaxed);
                    let remaining = deadline.saturating_duration_since(tokio::time::Instant::now());
                    self.inner
                        .client
                        .post_with_timeout::<_, QueryResponse>(
                            endpoint,
                            QUERY_CONTEXT,
                            provider_query,
                            cfg.provider_token(),
                            Some(remaining.max(Duration::from_millis(1))),
                        )
                        .await
                };
                let outcome = tokio::time::timeout_at(deadline, call)
                    .await
                    .unwrap_or(Err(CallError::Timeout));
                (endpoint, outcome)
            }
        });
        let mut parts = Vec::with_capacity(providers.len());
        let mut failures = Vec::new();
        for (endpoint, outcome) in join_all(calls).await {
            match outcome {
                Ok(response) => parts.push(response),
                Err(e) => failures.push(Annotation {
                    source: endpoint.clone(),
                    code: e.code(),
                    reason: e.to_string(),
                }),
            }
        }
        let mut response = aggregate_responses(&parts, q.aggregate)
            .map_err(|e| ApiError::Unprocessable(e.to_string()))?;
        response.annotations.extend(failures);
        response.annotations.sort();
        Ok(response)
    }

    pub async fn subscribe(&self, mut sub: Subscription) -> ApiResult<String> {
        if sub.kind != SubscriptionKind::Context {
            return Err(ApiError::BadRequest("kind must be context".into()));
        }
        if !is_valid_endpoint(&sub.callback_endpoint) {
            return Err(ApiError::BadRequest(format!(
                "invalid callback endpoint {:?}",
                sub.callback_endpoint
            )));
        }
        if sub.entities.is_empty() {
            return Err(ApiError::BadRequest("subscription names no entities".into()));
        }
        if sub.subscription_id.is_empty() {
            sub.subscription_id = uuid::Uuid::new_v4().to_string();
        }
        let inbound_id = sub.subscription_id.clone();
        let availability_sub_id = uuid::Uuid::new_v4().to_string();
        let availability = Subscription {
            subscription_id: availability_sub_id.clone(),
            ..Subscription::availability(
                sub.entities.clone(),
                sub.attribute_names.clone(),
                self.inner.availability_callback.clone(),
                sub.ttl,
            )
        };
        let state = Arc::new(tokio::sync::Mutex::new(SubscriptionState {
            inbound: sub,
            created_at_ms: self.inner.clock.now_ms(),
            availability_sub_id: availability_sub_id.clone(),
            provider_subs: BTreeMap::new(),
        }));
        {
            let mut routing = self.inner.routing.lock();
            if routing.states.contains_key(&inbound_id) {
                return Err(ApiError::Conflict(format!("subscription {inbound_id} already exists")));
            }
            routing.states.insert(inbound_id.clone(), state);
            routing.by_availability.insert(availability_sub_id.clone(), inbound_id.clone());
        }
        // mappings exist before the call so an immediate notification finds them
        let cfg = &self.inner.config;
        let result = self
            .inner
            .client
            .post::<_, SubscribeResponse>(
                &cfg.discovery_endpoint,
                SUBSCRIBE_AVAILABILITY,
                &availability,
                cfg.token.as_deref(),
            )
            .await;
        if let Err(e) = result {
            tracing::warn!(error = %e, "availability subscription failed");
            let mut routing = self.inner.routing.lock();
            routing.states.remove(&inbound_id);
            routing.by_availability.remove(&availability_sub_id);
            return Err(ApiError::BadGateway("discovery unreachable".into()));
        }
        Ok(inbound_id)
    }

    /// New providers for a brokered subscription; each endpoint is
    /// subscribed to once.
    pub async fn handle_availability(&self, n: NotifyAvailabilityRequest) -> ApiResult<()> {
        let state = {
            let routing = self.inner.routing.lock();
            routing
                .by_availability
                .get(&n.subscription_id)
                .and_then(|id| routing.states.get(id))
                .cloned()
        };
        let Some(state) = state else {
            return Err(ApiError::NotFound("unknown subscription".into()));
        };
        let mut state = state.lock().await;
        let providers = select_providers(&n.registrations, &self.inner.exclude);
        let mut failed = false;
        for endpoint in providers {
            let key = normalize_endpoint(&endpoint);
            if state.provider_subs.contains_key(&key) {
                continue;
            }
            let provider_sub_id = uuid::Uuid::new_v4().to_string();
            let provider_sub = Subscription {
                subscription_id: provider_sub_id.clone(),
                ..Subscription::context(
                    state.inbound.entities.clone(),
                    state.inbound.attribute_names.clone(),
                    self.inner.self_endpoint.clone(),
                    state.inbound.ttl,
                )
            };
            self.inner
                .routing
                .lock()
                .by_provider
                .insert(provider_sub_id.clone(), state.inbound.subscription_id.clone());
            let result = self
                .inner
                .client
                .post::<_, SubscribeResponse>(
                    &endpoint,
                    SUBSCRIBE_CONTEXT,
                    &provider_sub,
                    self.inner.config.provider_token(),
                )
                .await;
            match result {
                Ok(_) => {
                    state.provider_subs.insert(key, (endpoint, provider_sub_id));
                }
                Err(e) => {
                    tracing::warn!(%endpoint, error = %e, "provider subscription failed");
                    self.inner.routing.lock().by_provider.remove(&provider_sub_id);
                    failed = true;
                }
            }
        }
        if failed {
            // a 5xx makes the discovery redeliver, which retries the missing providers
            return Err(ApiError::BadGateway("provider subscription failed".into()));
        }
        Ok(())
    }

    pub async fn handle_provider_notification(&self, n: NotifyContextRequest) -> ApiResult<()> {
        let state = {
            let routing = self.inner.routing.lock();
            routing
                .by_provider
                .get(&n.subscription_id)
                .and_then(|id| routing.states.get(id))
                .cloned()
        };
        let Some(state) = state else {
            return Err(ApiError::NotFound("unknown subscription".into()));
        };
        let (inbound, expired) = {
            let state = state.lock().await;
            let now = self.inner.clock.now_ms();
            (state.inbound.clone(), state.inbound.is_expired(state.created_at_ms, now))
        };
        if expired {
            self.teardown(&inbound.subscription_id).await;
            return Err(ApiError::NotFound("subscription expired".into()));
        }
        let elements = refine_notification(&inbound, n.context_elements);
        if elements.is_empty() {
            return Ok(());
        }
        self.inner.stats.forwarded_notifications.fetch_add(1, Ordering::Relaxed);
        self.inner.notifier.dispatch(
            inbound.callback_endpoint.clone(),
            NOTIFY_CONTEXT,
            &NotifyContextRequest {
                subscription_id: inbound.subscription_id.clone(),
                context_elements: elements,
            },
            self.inner.config.requester_token().map(str::to_owned),
        );
        Ok(())
    }

    pub async fn unsubscribe(&self, subscription_id: &str) -> ApiResult<()> {
        if self.teardown(subscription_id).await {
            Ok(())
        } else {
            Err(ApiError::NotFound(format!("unknown subscription {subscription_id}")))
        }
    }

    /// Drop local state and cancel the availability and provider
    /// subscriptions. Remote failures are logged only.
    async fn teardown(&self, inbound_id: &str) -> bool {
        let state = {
            let mut routing = self.inner.routing.lock();
            let Some(state) = routing.states.remove(inbound_id) else {
                return false;
            };
            routing.by_availability.retain(|_, v| v != inbound_id);
            routing.by_provider.retain(|_, v| v != inbound_id);
            state
        };
        let state = state.lock().await;
        let cfg = &self.inner.config;
        let client = &self.inner.client;
        let availability_request = UnsubscribeRequest {
            subscription_id: state.availability_sub_id.clone(),
        };
        let availability = client.post::<_, Ack>(
            &cfg.discovery_endpoint,
            UNSUBSCRIBE_AVAILABILITY,
            &availability_request,
            cfg.token.as_deref(),
        );
        let providers = state.provider_subs.values().map(|(endpoint, id)| async move {
            let request = UnsubscribeRequest {
                subscription_id: id.clone(),
            };
            client
                .post::<_, Ack>(endpoint, UNSUBSCRIBE_CONTEXT, &request, cfg.provider_token())
                .await
        });
        let (a, p) = futures::join!(availability, join_all(providers));
        for e in std::iter::once(a).chain(p).filter_map(Result::err) {
            tracing::debug!(error = %e, "teardown call failed");
        }
        true
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route(QUERY_CONTEXT, post(query_context))
            .route(SUBSCRIBE_CONTEXT, post(subscribe_context))
            .route(UNSUBSCRIBE_CONTEXT, post(unsubscribe_context))
            .route(NOTIFY_CONTEXT, post(notify_context))
            .route(NOTIFY_AVAILABILITY, post(notify_availability))
            .route(STATUS, get(status))
            .with_state(self.clone())
    }
}

async fn query_context(State(b): State<Broker>, body: Bytes) -> ApiResult<Json<QueryResponse>> {
    let q: QueryRequest = parse_body(&body)?;
    Ok(Json(b.query(&q).await?))
}

async fn subscribe_context(State(b): State<Broker>, body: Bytes) -> ApiResult<Json<SubscribeResponse>> {
    let sub: Subscription = parse_body(&body)?;
    Ok(Json(SubscribeResponse {
        subscription_id: b.subscribe(sub).await?,
    }))
}

async fn unsubscribe_context(State(b): State<Broker>, body: Bytes) -> ApiResult<Json<Ack>> {
    let request: UnsubscribeRequest = parse_body(&body)?;
    b.unsubscribe(&request.subscription_id).await?;
    Ok(Json(Ack {}))
}

async fn notify_context(State(b): State<Broker>, body: Bytes) -> ApiResult<Json<Ack>> {
    let n: NotifyContextRequest = parse_body(&body)?;
    b.handle_provider_notification(n).await?;
    Ok(Json(Ack {}))
}

async fn notify_availability(State(b): State<Broker>, body: Bytes) -> ApiResult<Json<Ack>> {
    let n: NotifyAvailabilityRequest = parse_body(&body)?;
    b.handle_availability(n).await?;
    Ok(Json(Ack {}))
}

async fn status() -> Json<StatusResponse> {
    Json(StatusResponse {
        service: "broker".into(),
        ok: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Attribute, EntityRef, Scope};

    fn reg(endpoint: &str, ttl: u64) -> Registration {
        Registration {
            registration_id: uuid::Uuid::new_v4().to_string(),
            version: 1,
            providing_endpoint: endpoint.into(),
            entities: vec![EntityRef::any()],
            attribute_names: vec![],
            scope: Scope::None,
            ttl,
        }
    }

    #[test]
    fn providers_deduplicated_after_normalization() {
        let regs = [
            reg("http://LocalHost:9000/", 60),
            reg("http://localhost:9000", 60),
            reg("http://localhost:9001", 60),
        ];
        assert_eq!(select_providers(&regs, &HashSet::new()).len(), 2);
    }

    #[test]
    fn excluded_and_tombstoned_providers_skipped() {
        let regs = [reg("http://a:1", 60), reg("http://b:1", 0), reg("http://c:1/", 60)];
        let exclude = HashSet::from([normalize_endpoint("http://c:1")]);
        assert_eq!(select_providers(&regs, &exclude), ["http://a:1"]);
    }

    #[test]
    fn refine_keeps_requested_attributes() {
        let inbound = Subscription::context(
            vec![EntityRef::pattern("*", "Car")],
            (0..20).map(|i| format!("a{i}")).collect(),
            "http://x:1",
            60,
        );
        let element = ContextElement::new(
            EntityRef::new("car-1", "Car"),
            (0..100).map(|i| Attribute::number(format!("a{i}"), i as f64, 1)).collect(),
        );
        let out = refine_notification(&inbound, vec![element]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].attributes.len(), 20);
    }

    #[test]
    fn refine_suppresses_vacuous_payload() {
        let inbound = Subscription::context(vec![EntityRef::any()], vec!["t".into()], "http://x:1", 60);
        let element = ContextElement::new(EntityRef::new("e", "T"), vec![Attribute::number("h", 1.0, 1)]);
        assert!(refine_notification(&inbound, vec![element]).is_empty());
        let other = ContextElement::new(EntityRef::new("e", "T"), vec![Attribute::number("t", 1.0, 1)]);
        let bike_only = Subscription::context(vec![EntityRef::pattern("*", "Bike")], vec![], "http://x:1", 60);
        assert!(refine_notification(&bike_only, vec![other]).is_empty());
    }

    #[test]
    fn role_tokens() {
        let mut cfg = BrokerConfig::new(BrokerRole::OutFed, "http://d:1");
        cfg.token = Some("intra".into());
        cfg.outbound_token = Some("fed".into());
        assert_eq!(cfg.provider_token(), Some("fed"));
        assert_eq!(cfg.requester_token(), Some("intra"));
        cfg.role = BrokerRole::InFed;
        assert_eq!(cfg.provider_token(), Some("intra"));
        assert_eq!(cfg.requester_token(), Some("fed"));
        cfg.role = BrokerRole::Intra;
        assert_eq!(cfg.provider_token(), Some("intra"));
        assert_eq!(cfg.requester_token(), None);
    }

    #[test]
    fn zero_timeout_rejected() {
        let mut cfg = BrokerConfig::new(BrokerRole::Intra, "http://d:1");
        cfg.fanout_timeout_ms = 0;
        assert!(cfg.validate().is_err());
    }
}
