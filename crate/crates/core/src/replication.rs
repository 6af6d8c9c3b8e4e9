//! Full-mesh op broadcast for replicated registries. Each op is delivered
//! to every peer in FIFO order and retried until acknowledged; receivers
//! apply ops idempotently (by op id) with last-writer-wins per key.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::model::wire::{Ack, REPLICATE};
use crate::net::WireClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplicationKind {
    Registration,
    Identity,
    Token,
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplicationOp {
    pub op_id: String,
    pub kind: ReplicationKind,
    pub payload: serde_json::Value,
    pub origin_domain: String,
    pub version: u64,
    /// Origin wall-clock time of the write, epoch milliseconds.
    #[serde(default)]
    pub issued_at_ms: i64,
}

impl ReplicationOp {
    pub fn new(
        kind: ReplicationKind,
        payload: serde_json::Value,
        origin_domain: &str,
        version: u64,
        issued_at_ms: i64,
    ) -> Self {
        Self {
            op_id: uuid::Uuid::new_v4().to_string(),
            kind,
            payload,
            origin_domain: origin_domain.to_owned(),
            version,
            issued_at_ms,
        }
    }

    /// Total order used to resolve concurrent writes to the same key.
    pub fn precedence(&self) -> (u64, &str, &str) {
        (self.version, &self.origin_domain, &self.op_id)
    }
}

/// Op ids already applied at a replica.
#[derive(Debug, Default)]
pub struct SeenOps {
    ids: HashSet<String>,
}

impl SeenOps {
    /// Returns true the first time an op id is offered.
    pub fn first_time(&mut self, op_id: &str) -> bool {
        self.ids.insert(op_id.to_owned())
    }
}

#[derive(Debug)]
struct PeerLink {
    peer: String,
    tx: mpsc::UnboundedSender<ReplicationOp>,
}

/// Outbound side of a replica.
#[derive(Debug, Clone)]
pub struct Replicator {
    links: Arc<Vec<PeerLink>>,
    pending: Arc<AtomicUsize>,
}

const MAX_BACKOFF: Duration = Duration::from_secs(5);

impl Replicator {
    /// Spawns one delivery task per peer.
    pub fn new(peers: Vec<String>, client: WireClient) -> Self {
        let pending = Arc::new(AtomicUsize::new(0));
        let links = peers
            .into_iter()
            .map(|peer| {
                let (tx, mut rx) = mpsc::unbounded_channel::<ReplicationOp>();
                let client = client.clone();
                let pending = pending.clone();
                let target = peer.clone();
                tokio::spawn(async move {
                    while let Some(op) = rx.recv().await {
                        let mut delay = Duration::from_millis(50);
                        loop {
                            match client.post::<_, Ack>(&target, REPLICATE, &op, None).await {
                                Ok(_) => break,
                                Err(e) => {
                                    tracing::debug!(peer = %target, error = %e, "replication retry");
                                    tokio::time::sleep(delay).await;
                                    delay = (delay * 2).min(MAX_BACKOFF);
                                }
                            }
                        }
                        pending.fetch_sub(1, Ordering::SeqCst);
                    }
                });
                PeerLink { peer, tx }
            })
            .collect();
        Self {
            links: Arc::new(links),
            pending,
        }
    }

    pub fn peers(&self) -> Vec<String> {
        self.links.iter().map(|l| l.peer.clone()).collect()
    }

    pub fn broadcast(&self, op: &ReplicationOp) {
        for link in self.links.iter() {
            self.pending.fetch_add(1, Ordering::SeqCst);
            if link.tx.send(op.clone()).is_err() {
                self.pending.fetch_sub(1, Ordering::SeqCst);
            }
        }
    }

    /// Deliveries not yet acknowledged by a peer.
    pub fn pending(&self) -> usize {
        self.pending.load(Ordering::SeqCst)
    }

    /// Wait until every queued op has been acknowledged.
    pub async fn quiesce(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        while self.pending() > 0 {
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        true
    }
}
