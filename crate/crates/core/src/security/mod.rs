//! Token-based identity management, policy decisions and policy
//! enforcement. One authority (identity manager plus decision point) runs
//! per security scope; federation-scope authorities replicate their state.

mod idm;
mod pdp;
mod pep;

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use idm::{
    digest_secret, fresh_token_value, Identity, IdentityKind, IdentityStore, IdmError, StoredIdentity, Token,
};
pub use pdp::{authorize, decide, Action, Decision, Effect, Policy, Verdict};
pub use pep::{action_for_path, resources_for, restrict, Pep, PepConfig, PepStats};

use crate::clock::SharedClock;
use crate::error::{parse_body, ApiError, ApiResult};
use crate::model::wire::{Ack, StatusResponse, REPLICATE, STATUS};
use crate::net::WireClient;
use crate::replication::{ReplicationKind, ReplicationOp, Replicator, SeenOps};

pub const ISSUE_TOKEN: &str = "/v1/token";
pub const VALIDATE: &str = "/v1/validate";
pub const AUTHORIZE: &str = "/v1/authorize";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenRequest {
    pub subject_id: String,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenResponse {
    pub value: String,
    pub ttl: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ValidateRequest {
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ValidateResponse {
    pub subject_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuthorizeRequest {
    pub subject_id: String,
    pub action: Action,
    #[serde(default)]
    pub resources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuthorityConfig {
    #[serde(default = "crate::cm::default_listen")]
    pub listen: String,
    #[serde(default)]
    pub origin: String,
    #[serde(default)]
    pub peers: Vec<String>,
    #[serde(default)]
    pub identities: Vec<Identity>,
    /// JSON array of identities, loaded in addition to `identities`.
    #[serde(default)]
    pub identities_path: Option<PathBuf>,
    #[serde(default)]
    pub policies: Vec<Policy>,
    /// JSON array of policies, ordered; replaces `policies` when set.
    #[serde(default)]
    pub policies_path: Option<PathBuf>,
    #[serde(default = "default_token_ttl")]
    pub token_ttl: u64,
}

fn default_token_ttl() -> u64 {
    3600
}

impl Default for AuthorityConfig {
    fn default() -> Self {
        Self {
            listen: crate::cm::default_listen(),
            origin: String::new(),
            peers: Vec::new(),
            identities: Vec::new(),
            identities_path: None,
            policies: Vec::new(),
            policies_path: None,
            token_ttl: default_token_ttl(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuthorityError {
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
    #[error(transparent)]
    Identity(#[from] IdmError),
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, AuthorityError> {
    let text = std::fs::read_to_string(path).map_err(|source| AuthorityError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| AuthorityError::Parse {
        path: path.clone(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PolicySet {
    policies: Vec<Policy>,
    version: u64,
    origin: String,
    op_id: String,
}

struct Inner {
    identities: RwLock<IdentityStore>,
    policies: RwLock<PolicySet>,
    seen: Mutex<SeenOps>,
    origin: String,
    token_ttl: u64,
    replicator: Option<Replicator>,
    clock: SharedClock,
}

/// Identity manager and policy decision point of one security scope.
#[derive(Clone)]
pub struct Authority {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Authority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Authority").field("origin", &self.inner.origin).finish()
    }
}

impl Authority {
    pub fn new(config: &AuthorityConfig, client: WireClient, clock: SharedClock) -> Result<Self, AuthorityError> {
        let mut identities = IdentityStore::new();
        let mut listed = config.identities.clone();
        if let Some(path) = &config.identities_path {
            listed.extend(load_json::<Vec<Identity>>(path)?);
        }
        for identity in &listed {
            identities.add_identity(identity)?;
        }
        let policies = match &config.policies_path {
            Some(path) => load_json(path)?,
            None => config.policies.clone(),
        };
        let replicator =
            (!config.peers.is_empty()).then(|| Replicator::new(config.peers.clone(), client));
        Ok(Self {
            inner: Arc::new(Inner {
                identities: RwLock::new(identities),
                policies: RwLock::new(PolicySet {
                    policies,
                    version: 0,
                    origin: String::new(),
                    op_id: String::new(),
                }),
                seen: Mutex::new(SeenOps::default()),
                origin: config.origin.clone(),
                token_ttl: config.token_ttl,
                replicator,
                clock,
            }),
        })
    }

    pub fn replicator(&self) -> Option<&Replicator> {
        self.inner.replicator.as_ref()
    }

    fn broadcast(&self, kind: ReplicationKind, payload: serde_json::Value, version: u64, op_id: Option<String>) {
        if let Some(replicator) = &self.inner.replicator {
            let mut op = ReplicationOp::new(kind, payload, &self.inner.origin, version, self.inner.clock.now_ms());
            if let Some(id) = op_id {
                op.op_id = id;
            }
            self.inner.seen.lock().first_time(&op.op_id);
            replicator.broadcast(&op);
        }
    }

    pub fn add_identity(&self, identity: &Identity) -> Result<(), IdmError> {
        let stored = self.inner.identities.write().add_identity(identity)?;
        self.broadcast(
            ReplicationKind::Identity,
            serde_json::to_value(&stored).expect("serializable identity"),
            stored.version,
            None,
        );
        Ok(())
    }

    pub fn knows_subject(&self, subject_id: &str) -> bool {
        self.inner.identities.read().has_subject(subject_id)
    }

    pub fn issue_token(&self, subject_id: &str, secret: &str) -> Result<Token, IdmError> {
        let now = self.inner.clock.now_ms();
        let token = self
            .inner
            .identities
            .write()
            .issue(subject_id, secret, now, self.inner.token_ttl)?;
        self.broadcast(
            ReplicationKind::Token,
            serde_json::to_value(&token).expect("serializable token"),
            1,
            None,
        );
        Ok(token)
    }

    pub fn validate(&self, value: &str) -> Option<String> {
        let now = self.inner.clock.now_ms();
        self.inner.identities.read().validate(value, now).map(str::to_owned)
    }

    pub fn policies(&self) -> Vec<Policy> {
        self.inner.policies.read().policies.clone()
    }

    /// Replace the ordered policy list, replicating it to peers.
    pub fn set_policies(&self, policies: Vec<Policy>) {
        let set = {
            let mut current = self.inner.policies.write();
            *current = PolicySet {
                policies,
                version: current.version + 1,
                origin: self.inner.origin.clone(),
                op_id: uuid::Uuid::new_v4().to_string(),
            };
            current.clone()
        };
        self.broadcast(
            ReplicationKind::Policy,
            serde_json::to_value(&set).expect("serializable policies"),
            set.version,
            Some(set.op_id.clone()),
        );
    }

    pub fn authorize(&self, subject_id: &str, action: Action, resources: &[String]) -> Decision {
        authorize(&self.inner.policies.read().policies, subject_id, action, resources)
    }

    /// Apply a peer's op; duplicates and losing writes change nothing.
    pub fn apply(&self, op: &ReplicationOp) -> Result<bool, ApiError> {
        if !self.inner.seen.lock().first_time(&op.op_id) {
            return Ok(false);
        }
        let bad = |e: serde_json::Error| ApiError::BadRequest(e.to_string());
        Ok(match op.kind {
            ReplicationKind::Identity => {
                let stored: StoredIdentity = serde_json::from_value(op.payload.clone()).map_err(bad)?;
                self.inner.identities.write().apply_identity(stored)
            }
            ReplicationKind::Token => {
                let token: Token = serde_json::from_value(op.payload.clone()).map_err(bad)?;
                self.inner.identities.write().apply_token(token)
            }
            ReplicationKind::Policy => {
                let incoming: PolicySet = serde_json::from_value(op.payload.clone()).map_err(bad)?;
                let mut current = self.inner.policies.write();
                let newer = (incoming.version, &incoming.origin, &incoming.op_id)
                    > (current.version, &current.origin, &current.op_id);
                if newer {
                    *current = incoming;
                }
                newer
            }
            ReplicationKind::Registration => {
                return Err(ApiError::BadRequest("unsupported op kind".into()));
            }
        })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route(ISSUE_TOKEN, post(issue_token))
            .route(VALIDATE, post(validate))
            .route(AUTHORIZE, post(authorize_request))
            .route(REPLICATE, post(replicate))
            .route(STATUS, get(status))
            .with_state(self.clone())
    }
}

async fn issue_token(State(a): State<Authority>, body: Bytes) -> ApiResult<Json<TokenResponse>> {
    let request: TokenRequest = parse_body(&body)?;
    let token = a
        .issue_token(&request.subject_id, &request.secret)
        .map_err(|_| ApiError::Unauthorized)?;
    Ok(Json(TokenResponse {
        value: token.value,
        ttl: token.ttl,
    }))
}

async fn validate(State(a): State<Authority>, body: Bytes) -> ApiResult<Json<ValidateResponse>> {
    let request: ValidateRequest = parse_body(&body)?;
    a.validate(&request.value)
        .map(|subject_id| Json(ValidateResponse { subject_id }))
        .ok_or(ApiError::Unauthorized)
}

async fn authorize_request(State(a): State<Authority>, body: Bytes) -> ApiResult<Json<Decision>> {
    let request: AuthorizeRequest = parse_body(&body)?;
    Ok(Json(a.authorize(&request.subject_id, request.action, &request.resources)))
}

async fn replicate(State(a): State<Authority>, body: Bytes) -> ApiResult<Json<Ack>> {
    let op: ReplicationOp = parse_body(&body)?;
    a.apply(&op)?;
    Ok(Json(Ack {}))
}

async fn status() -> Json<StatusResponse> {
    Json(StatusResponse {
        service: "authority".into(),
        ok: true,
    })
}

/// Obtain a token from an authority over the wire.
pub async fn request_token(
    client: &WireClient,
    authority: &str,
    subject_id: &str,
    secret: &str,
) -> Result<TokenResponse, crate::net::CallError> {
    client
        .post(
            authority,
            ISSUE_TOKEN,
            &TokenRequest {
                subject_id: subject_id.into(),
                secret: secret.into(),
            },
            None,
        )
        .await
}
