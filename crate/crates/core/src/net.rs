//! HTTP plumbing: the outbound client every service uses, an optional wire
//! tap for capturing traffic, and listener/serve helpers.

use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use bytes::Bytes;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::model::wire::{ErrorBody, AUTH_HEADER};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CallError {
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("timed out")]
    Timeout,
    #[error("status {code}: {reason}")]
    Status { code: u16, reason: String },
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl CallError {
    pub fn code(&self) -> u16 {
        match self {
            CallError::Unreachable(_) => 502,
            CallError::Timeout => 504,
            CallError::Status { code, .. } => *code,
            CallError::Decode(_) => 502,
        }
    }

    /// Transport-level failures worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            CallError::Unreachable(_) | CallError::Timeout => true,
            CallError::Status { code, .. } => *code >= 500,
            CallError::Decode(_) => false,
        }
    }
}

/// One captured HTTP exchange.
#[derive(Debug, Clone)]
pub struct WireRecord {
    pub origin: String,
    pub url: String,
    pub token: Option<String>,
    pub request_body: String,
    pub status: u16,
    pub response_body: String,
}

impl WireRecord {
    /// Everything that crossed the wire, headers included.
    pub fn contains(&self, needle: &str) -> bool {
        self.url.contains(needle)
            || self.token.as_deref().is_some_and(|t| t.contains(needle))
            || self.request_body.contains(needle)
            || self.response_body.contains(needle)
    }
}

#[derive(Debug, Clone, Default)]
pub struct WireTap {
    records: Arc<Mutex<Vec<WireRecord>>>,
}

impl WireTap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<WireRecord> {
        self.records.lock().clone()
    }

    pub fn clear(&self) {
        self.records.lock().clear();
    }

    fn push(&self, record: WireRecord) {
        self.records.lock().push(record);
    }
}

#[derive(Clone)]
pub struct WireClient {
    http: reqwest::Client,
    tap: Option<(WireTap, Arc<str>)>,
}

impl Default for WireClient {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for WireClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WireClient")
            .field("tapped", &self.tap.is_some())
            .finish()
    }
}

impl WireClient {
    pub fn new() -> Self {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(2))
            .pool_max_idle_per_host(64)
            .build()
            .expect("http client");
        Self { http, tap: None }
    }

    /// Record every exchange made through this client, labelled `origin`.
    pub fn tapped(&self, tap: WireTap, origin: &str) -> Self {
        Self {
            http: self.http.clone(),
            tap: Some((tap, Arc::from(origin))),
        }
    }

    /// POST raw bytes; returns status and body without interpreting them.
    pub async fn post_bytes(
        &self,
        url: &str,
        body: Bytes,
        token: Option<&str>,
        timeout: Option<Duration>,
    ) -> Result<(u16, Bytes), CallError> {
        let mut request = self
            .http
            .post(url)
            .header("content-type", "application/json")
            .body(body.clone());
        if let Some(token) = token {
            request = request.header(AUTH_HEADER, token);
        }
        if let Some(timeout) = timeout {
            request = request.timeout(timeout);
        }
        let outcome = async {
            let response = request.send().await.map_err(classify)?;
            let status = response.status().as_u16();
            let bytes = response.bytes().await.map_err(classify)?;
            Ok::<_, CallError>((status, bytes))
        }
        .await;
        if let Some((tap, origin)) = &self.tap {
            let (status, response_body) = match &outcome {
                Ok((status, bytes)) => (*status, String::from_utf8_lossy(bytes).into_owned()),
                Err(e) => (e.code(), String::new()),
            };
            tap.push(WireRecord {
                origin: origin.to_string(),
                url: url.to_owned(),
                token: token.map(str::to_owned),
                request_body: String::from_utf8_lossy(&body).into_owned(),
                status,
                response_body,
            });
        }
        outcome
    }

    pub async fn post<Req: Serialize + ?Sized, Resp: DeserializeOwned>(
        &self,
        endpoint: &str,
        path: &str,
        body: &Req,
        token: Option<&str>,
    ) -> Result<Resp, CallError> {
        self.post_with_timeout(endpoint, path, body, token, None).await
    }

    pub async fn post_with_timeout<Req: Serialize + ?Sized, Resp: DeserializeOwned>(
        &self,
        endpoint: &str,
        path: &str,
        body: &Req,
        token: Option<&str>,
        timeout: Option<Duration>,
    ) -> Result<Resp, CallError> {
        let payload = serde_json::to_vec(body).map_err(|e| CallError::Decode(e.to_string()))?;
        let url = join_url(endpoint, path);
        let (status, bytes) = self.post_bytes(&url, payload.into(), token, timeout).await?;
        if !(200..300).contains(&status) {
            let reason = serde_json::from_slice::<ErrorBody>(&bytes)
                .map(|b| b.reason)
                .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
            return Err(CallError::Status { code: status, reason });
        }
        serde_json::from_slice(&bytes).map_err(|e| CallError::Decode(e.to_string()))
    }

    pub async fn get_status(&self, endpoint: &str) -> Result<u16, CallError> {
        let url = join_url(endpoint, crate::model::wire::STATUS);
        let response = self
            .http
            .get(url)
            .timeout(Duration::from_secs(2))
            .send()
            .await
            .map_err(classify)?;
        Ok(response.status().as_u16())
    }
}

fn classify(e: reqwest::Error) -> CallError {
    if e.is_timeout() {
        CallError::Timeout
    } else {
        CallError::Unreachable(e.to_string())
    }
}

pub fn join_url(endpoint: &str, path: &str) -> String {
    format!("{}{}", endpoint.trim_end_matches('/'), path)
}

/// Bind a loopback (or explicit) listener; returns it with its base URL.
pub async fn bind(addr: &str) -> std::io::Result<(TcpListener, String)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, format!("http://{local}")))
}

pub async fn bind_loopback() -> std::io::Result<(TcpListener, String)> {
    bind("127.0.0.1:0").await
}

/// A running HTTP service. Dropping the handle stops accepting connections.
#[derive(Debug)]
pub struct ServiceHandle {
    pub endpoint: String,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl ServiceHandle {
    pub fn is_running(&self) -> bool {
        !self.task.is_finished()
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.abort();
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

pub fn serve(listener: TcpListener, endpoint: String, router: Router) -> ServiceHandle {
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let shutdown = async {
            let _ = rx.await;
        };
        if let Err(e) = axum::serve(listener, router)
            .with_graceful_shutdown(shutdown)
            .await
        {
            tracing::warn!(error = %e, "server stopped");
        }
    });
    ServiceHandle {
        endpoint,
        shutdown: Some(tx),
        task,
    }
}

/// Bind on an ephemeral loopback port and serve `router`.
pub async fn serve_loopback(router: Router) -> std::io::Result<ServiceHandle> {
    let (listener, endpoint) = bind_loopback().await?;
    Ok(serve(listener, endpoint, router))
}
