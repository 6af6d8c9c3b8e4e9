//! Off-request-path delivery of callbacks with bounded retries.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use crate::model::wire::Ack;
use crate::net::{CallError, WireClient};

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Default)]
pub struct DeliveryStats {
    pub delivered: AtomicU64,
    /// Receiver answered with a 4xx; not retried.
    pub rejected: AtomicU64,
    /// Gave up after the last attempt.
    pub dropped: AtomicU64,
}

impl DeliveryStats {
    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Relaxed)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone)]
pub struct Notifier {
    client: WireClient,
    policy: RetryPolicy,
    stats: Arc<DeliveryStats>,
}

impl Notifier {
    pub fn new(client: WireClient) -> Self {
        Self::with_policy(client, RetryPolicy::default())
    }

    pub fn with_policy(client: WireClient, policy: RetryPolicy) -> Self {
        Self {
            client,
            policy,
            stats: Arc::default(),
        }
    }

    pub fn stats(&self) -> &DeliveryStats {
        &self.stats
    }

    /// Queue a delivery on a background task.
    pub fn dispatch<T: Serialize>(
        &self,
        endpoint: String,
        path: &'static str,
        body: &T,
        token: Option<String>,
    ) {
        let payload = match serde_json::to_value(body) {
            Ok(v) => v,
            Err(e) => {
                tracing::error!(error = %e, "unserializable notification");
                return;
            }
        };
        let this = self.clone();
        tokio::spawn(async move {
            this.deliver(&endpoint, path, &payload, token.as_deref()).await;
        });
    }

    /// Deliver with exponential backoff. Returns whether the receiver
    /// accepted the message.
    pub async fn deliver<T: Serialize + ?Sized>(
        &self,
        endpoint: &str,
        path: &str,
        body: &T,
        token: Option<&str>,
    ) -> bool {
        let mut delay = self.policy.base_delay;
        for attempt in 1..=self.policy.attempts {
            match self.client.post::<T, Ack>(endpoint, path, body, token).await {
                Ok(_) => {
                    self.stats.delivered.fetch_add(1, Ordering::Relaxed);
                    return true;
                }
                Err(CallError::Decode(_)) => {
                    // receiver accepted but answered with an unexpected body
                    self.stats.delivered.fetch_add(1, Ordering::Relaxed);
                    return true;
                }
                Err(e) if !e.is_transient() => {
                    tracing::debug!(%endpoint, error = %e, "notification rejected");
                    self.stats.rejected.fetch_add(1, Ordering::Relaxed);
                    return false;
                }
                Err(e) => {
                    tracing::debug!(%endpoint, attempt, error = %e, "notification attempt failed");
                    if attempt < self.policy.attempts {
                        tokio::time::sleep(delay).await;
                        delay *= 2;
                    }
                }
            }
        }
        self.stats.dropped.fetch_add(1, Ordering::Relaxed);
        false
    }
}
