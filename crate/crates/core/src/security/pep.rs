use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::pdp::{Action, Decision};
use super::{AuthorizeRequest, ValidateRequest, ValidateResponse, AUTHORIZE, VALIDATE};
use crate::error::{parse_body, ApiError};
use crate::model::wire::{
    NotifyAvailabilityRequest, NotifyContextRequest, StatusResponse, UpdateContextRequest,
    AUTH_HEADER, DISCOVER_AVAILABILITY, NOTIFY_AVAILABILITY, NOTIFY_CONTEXT, QUERY_CONTEXT,
    REGISTER_CONTEXT, STATUS, SUBSCRIBE_AVAILABILITY, SUBSCRIBE_CONTEXT, UNSUBSCRIBE_AVAILABILITY,
    UNSUBSCRIBE_CONTEXT, UPDATE_CONTEXT,
};
use crate::model::{ContextElement, EntityRef, QueryRequest, QueryResponse, Registration, Subscription};
use crate::net::{join_url, CallError, WireClient};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PepConfig {
    #[serde(default = "crate::cm::default_listen")]
    pub listen: String,
    pub upstream_endpoint: String,
    pub idm_endpoint: String,
    pub pdp_endpoint: String,
    /// Actions this proxy lets through at all; absent means every action.
    #[serde(default)]
    pub allowed_actions: Option<Vec<Action>>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_timeout() -> u64 {
    10_000
}

impl PepConfig {
    pub fn new(upstream: &str, idm: &str, pdp: &str) -> Self {
        Self {
            listen: crate::cm::default_listen(),
            upstream_endpoint: upstream.into(),
            idm_endpoint: idm.into(),
            pdp_endpoint: pdp.into(),
            allowed_actions: None,
            timeout_ms: default_timeout(),
        }
    }

    pub fn allowing(mut self, actions: &[Action]) -> Self {
        self.allowed_actions = Some(actions.to_vec());
        self
    }
}

/// Action a request path stands for.
pub fn action_for_path(path: &str) -> Option<Action> {
    Some(match path {
        QUERY_CONTEXT => Action::Query,
        SUBSCRIBE_CONTEXT | UNSUBSCRIBE_CONTEXT => Action::Subscribe,
        NOTIFY_CONTEXT | NOTIFY_AVAILABILITY | UPDATE_CONTEXT => Action::Notify,
        REGISTER_CONTEXT => Action::Register,
        DISCOVER_AVAILABILITY | SUBSCRIBE_AVAILABILITY | UNSUBSCRIBE_AVAILABILITY => Action::Discover,
        _ => return None,
    })
}

fn expand(entities: &[EntityRef], attribute_names: &[String], out: &mut Vec<String>) {
    for e in entities {
        if attribute_names.is_empty() {
            out.push(format!("{}/*", e.entity_type));
        } else {
            out.extend(attribute_names.iter().map(|a| format!("{}/{a}", e.entity_type)));
        }
    }
}

fn expand_elements(elements: &[ContextElement], out: &mut Vec<String>) {
    for e in elements {
        out.extend(e.attributes.iter().map(|a| format!("{}/{}", e.entity.entity_type, a.name)));
    }
}

/// "entityType/attributeName" strings a request body touches, deduplicated
/// and sorted. Unsubscribe requests touch none.
pub fn resources_for(path: &str, body: &[u8]) -> Result<Vec<String>, ApiError> {
    let mut out = Vec::new();
    match path {
        QUERY_CONTEXT | DISCOVER_AVAILABILITY => {
            let q: QueryRequest = parse_body(body)?;
            expand(&q.entities, &q.attribute_names, &mut out);
        }
        SUBSCRIBE_CONTEXT | SUBSCRIBE_AVAILABILITY => {
            let s: Subscription = parse_body(body)?;
            expand(&s.entities, &s.attribute_names, &mut out);
        }
        NOTIFY_CONTEXT => {
            let n: NotifyContextRequest = parse_body(body)?;
            expand_elements(&n.context_elements, &mut out);
        }
        UPDATE_CONTEXT => {
            let n: UpdateContextRequest = parse_body(body)?;
            expand_elements(&n.context_elements, &mut out);
        }
        REGISTER_CONTEXT => {
            let r: Registration = parse_body(body)?;
            expand(&r.entities, &r.attribute_names, &mut out);
        }
        NOTIFY_AVAILABILITY => {
            let n: NotifyAvailabilityRequest = parse_body(body)?;
            for r in &n.registrations {
                expand(&r.entities, &r.attribute_names, &mut out);
            }
        }
        _ => {}
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Keep only attributes in `filter`; unlike `filter_attributes`, an empty
/// filter removes everything.
pub fn restrict(element: &ContextElement, filter: &[String]) -> ContextElement {
    ContextElement {
        entity: element.entity.clone(),
        attributes: element
            .attributes
            .iter()
            .filter(|a| filter.contains(&a.name))
            .cloned()
            .collect(),
        provider_hint: element.provider_hint.clone(),
    }
}

fn restrict_all(elements: &[ContextElement], filter: &[String]) -> Vec<ContextElement> {
    elements
        .iter()
        .map(|e| restrict(e, filter))
        .filter(|e| !e.attributes.is_empty())
        .collect()
}

/// Rewrite a request body under a filtered permit. Returns `None` when
/// nothing permitted remains.
fn narrow_request(path: &str, body: &Bytes, filter: &[String]) -> Result<Option<Bytes>, ApiError> {
    Ok(match path {
        SUBSCRIBE_CONTEXT | SUBSCRIBE_AVAILABILITY => {
            let mut s: Subscription = parse_body(body)?;
            s.attribute_names = if s.attribute_names.is_empty() {
                filter.to_vec()
            } else {
                s.attribute_names.into_iter().filter(|a| filter.contains(a)).collect()
            };
            (!s.attribute_names.is_empty()).then(|| encode(&s))
        }
        NOTIFY_CONTEXT => {
            let mut n: NotifyContextRequest = parse_body(body)?;
            n.context_elements = restrict_all(&n.context_elements, filter);
            (!n.context_elements.is_empty()).then(|| encode(&n))
        }
        UPDATE_CONTEXT => {
            let mut n: UpdateContextRequest = parse_body(body)?;
            n.context_elements = restrict_all(&n.context_elements, filter);
            (!n.context_elements.is_empty()).then(|| encode(&n))
        }
        _ => Some(body.clone()),
    })
}

fn encode<T: Serialize>(value: &T) -> Bytes {
    Bytes::from(serde_json::to_vec(value).expect("serializable body"))
}

#[derive(Debug, Default)]
pub struct PepStats {
    pub upstream_requests: AtomicU64,
    pub rejected: AtomicU64,
}

struct Inner {
    config: PepConfig,
    client: WireClient,
    stats: PepStats,
}

/// Policy enforcement proxy in front of one component.
#[derive(Clone)]
pub struct Pep {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Pep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pep")
            .field("upstream", &self.inner.config.upstream_endpoint)
            .finish()
    }
}

impl Pep {
    pub fn new(config: &PepConfig, client: WireClient) -> Self {
        Self {
            inner: Arc::new(Inner {
                config: config.clone(),
                client,
                stats: PepStats::default(),
            }),
        }
    }

    pub fn stats(&self) -> &PepStats {
        &self.inner.stats
    }

    pub fn upstream_requests(&self) -> u64 {
        self.inner.stats.upstream_requests.load(Ordering::SeqCst)
    }

    fn timeout(&self) -> Option<Duration> {
        Some(Duration::from_millis(self.inner.config.timeout_ms))
    }

    async fn subject_of(&self, token: &str) -> Result<String, ApiError> {
        let cfg = &self.inner.config;
        let request = ValidateRequest { value: token.to_owned() };
        match self
            .inner
            .client
            .post_with_timeout::<_, ValidateResponse>(&cfg.idm_endpoint, VALIDATE, &request, None, self.timeout())
            .await
        {
            Ok(r) => Ok(r.subject_id),
            Err(CallError::Status { code, .. }) if (400..500).contains(&code) => Err(ApiError::Unauthorized),
            Err(e) => {
                tracing::warn!(error = %e, "identity manager unavailable");
                Err(ApiError::Unavailable("security service unavailable".into()))
            }
        }
    }

    async fn decision(&self, subject_id: String, action: Action, resources: Vec<String>) -> Result<Decision, ApiError> {
        let cfg = &self.inner.config;
        let request = AuthorizeRequest {
            subject_id,
            action,
            resources,
        };
        self.inner
            .client
            .post_with_timeout::<_, Decision>(&cfg.pdp_endpoint, AUTHORIZE, &request, None, self.timeout())
            .await
            .map_err(|e| {
                tracing::warn!(error = %e, "policy decision point unavailable");
                ApiError::Unavailable("security service unavailable".into())
            })
    }

    /// Full enforcement of one request. Rejections never reach upstream.
    pub async fn enforce(&self, path: &str, token: Option<&str>, body: Bytes) -> Result<(StatusCode, Bytes), ApiError> {
        let outcome = self.check_and_forward(path, token, body).await;
        if outcome.is_err() {
            self.inner.stats.rejected.fetch_add(1, Ordering::Relaxed);
        }
        outcome
    }

    async fn check_and_forward(&self, path: &str, token: Option<&str>, body: Bytes) -> Result<(StatusCode, Bytes), ApiError> {
        let action = action_for_path(path).ok_or_else(|| ApiError::NotFound("unknown endpoint".into()))?;
        if let Some(allowed) = &self.inner.config.allowed_actions {
            if !allowed.contains(&action) {
                return Err(ApiError::Forbidden);
            }
        }
        let token = token.filter(|t| !t.is_empty()).ok_or(ApiError::Unauthorized)?;
        let subject = self.subject_of(token).await?;
        let resources = resources_for(path, &body)?;
        let decision = self.decision(subject, action, resources).await?;
        if !decision.is_permit() {
            return Err(ApiError::Forbidden);
        }
        let body = match &decision.filter {
            Some(filter) => narrow_request(path, &body, filter)?.ok_or(ApiError::Forbidden)?,
            None => body,
        };
        self.inner.stats.upstream_requests.fetch_add(1, Ordering::SeqCst);
        let url = join_url(&self.inner.config.upstream_endpoint, path);
        let (status, bytes) = self
            .inner
            .client
            .post_bytes(&url, body, None, self.timeout())
            .await
            .map_err(|e| {
                tracing::warn!(error = %e, "upstream unreachable");
                ApiError::BadGateway("upstream unreachable".into())
            })?;
        let status = StatusCode::from_u16(status).unwrap_or(StatusCode::BAD_GATEWAY);
        let bytes = match (&decision.filter, path) {
            (Some(filter), QUERY_CONTEXT) if status.is_success() => {
                let mut response: QueryResponse = serde_json::from_slice(&bytes)
                    .map_err(|_| ApiError::BadGateway("malformed upstream response".into()))?;
                response.context_elements = response
                    .context_elements
                    .iter()
                    .map(|e| restrict(e, filter))
                    .collect();
                Bytes::from(serde_json::to_vec(&response).expect("serializable response"))
            }
            _ => bytes,
        };
        Ok((status, bytes))
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route(STATUS, get(status))
            .fallback(proxy)
            .with_state(self.clone())
    }
}

async fn proxy(State(pep): State<Pep>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    if method != Method::POST {
        return StatusCode::METHOD_NOT_ALLOWED.into_response();
    }
    let token = headers.get(AUTH_HEADER).and_then(|v| v.to_str().ok());
    match pep.enforce(uri.path(), token, body).await {
        Ok((status, bytes)) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn status() -> Json<StatusResponse> {
    Json(StatusResponse {
        service: "pep".into(),
        ok: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Attribute;

    #[test]
    fn path_actions() {
        assert_eq!(action_for_path(QUERY_CONTEXT), Some(Action::Query));
        assert_eq!(action_for_path(UNSUBSCRIBE_CONTEXT), Some(Action::Subscribe));
        assert_eq!(action_for_path(NOTIFY_AVAILABILITY), Some(Action::Notify));
        assert_eq!(action_for_path(SUBSCRIBE_AVAILABILITY), Some(Action::Discover));
        assert_eq!(action_for_path("/v1/other"), None);
    }

    #[test]
    fn query_resources_expand() {
        let q = QueryRequest::new(
            vec![EntityRef::new("a", "T"), EntityRef::new("b", "T"), EntityRef::new("c", "U")],
            vec!["x".into(), "y".into()],
        );
        let body = serde_json::to_vec(&q).unwrap();
        assert_eq!(resources_for(QUERY_CONTEXT, &body).unwrap(), ["T/x", "T/y", "U/x", "U/y"]);
        let all = QueryRequest::new(vec![EntityRef::any()], vec![]);
        let body = serde_json::to_vec(&all).unwrap();
        assert_eq!(resources_for(QUERY_CONTEXT, &body).unwrap(), ["*/*"]);
    }

    #[test]
    fn malformed_body_is_bad_request() {
        assert!(matches!(resources_for(QUERY_CONTEXT, b"{"), Err(ApiError::BadRequest(_))));
    }

    #[test]
    fn subscribe_narrowed_to_filter() {
        let s = Subscription::context(vec![EntityRef::any()], vec![], "http://x:1", 60);
        let body = Bytes::from(serde_json::to_vec(&s).unwrap());
        let out = narrow_request(SUBSCRIBE_CONTEXT, &body, &["t".into()]).unwrap().unwrap();
        let s: Subscription = serde_json::from_slice(&out).unwrap();
        assert_eq!(s.attribute_names, ["t"]);
        let s = Subscription::context(vec![EntityRef::any()], vec!["h".into()], "http://x:1", 60);
        let body = Bytes::from(serde_json::to_vec(&s).unwrap());
        assert!(narrow_request(SUBSCRIBE_CONTEXT, &body, &["t".into()]).unwrap().is_none());
    }

    #[test]
    fn empty_filter_removes_everything() {
        let e = ContextElement::new(EntityRef::new("a", "T"), vec![Attribute::number("x", 1.0, 1)]);
        assert!(restrict(&e, &[]).attributes.is_empty());
    }
}
