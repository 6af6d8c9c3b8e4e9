#![allow(dead_code)]

use std::future::Future;
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use tokio::sync::mpsc;

use liots_core::model::wire::{Ack, NotifyAvailabilityRequest, NotifyContextRequest, NOTIFY_AVAILABILITY, NOTIFY_CONTEXT};
use liots_core::model::{Attribute, ContextElement, EntityRef, GeoPoint};
use liots_core::net::{serve_loopback, ServiceHandle};

/// Callback endpoint collecting every notification it receives.
pub struct Inbox {
    pub handle: ServiceHandle,
    pub context: mpsc::UnboundedReceiver<NotifyContextRequest>,
    pub availability: mpsc::UnboundedReceiver<NotifyAvailabilityRequest>,
}

impl Inbox {
    pub async fn start() -> Self {
        let (ctx_tx, context) = mpsc::unbounded_channel();
        let (av_tx, availability) = mpsc::unbounded_channel();
        let router = Router::new()
            .route(
                NOTIFY_CONTEXT,
                post(|State((tx, _)): State<Senders>, Json(n): Json<NotifyContextRequest>| async move {
                    let _ = tx.send(n);
                    Json(Ack {})
                }),
            )
            .route(
                NOTIFY_AVAILABILITY,
                post(|State((_, tx)): State<Senders>, Json(n): Json<NotifyAvailabilityRequest>| async move {
                    let _ = tx.send(n);
                    Json(Ack {})
                }),
            )
            .with_state((ctx_tx, av_tx));
        let handle = serve_loopback(router).await.unwrap();
        Self {
            handle,
            context,
            availability,
        }
    }

    pub fn endpoint(&self) -> String {
        self.handle.endpoint.clone()
    }

    /// Next context notification carrying at least one element.
    pub async fn next_context(&mut self, within: Duration) -> Option<NotifyContextRequest> {
        let deadline = tokio::time::Instant::now() + within;
        loop {
            match tokio::time::timeout_at(deadline, self.context.recv()).await {
                Ok(Some(n)) if !n.context_elements.is_empty() => return Some(n),
                Ok(Some(_)) => continue,
                _ => return None,
            }
        }
    }
}

type Senders = (
    mpsc::UnboundedSender<NotifyContextRequest>,
    mpsc::UnboundedSender<NotifyAvailabilityRequest>,
);

/// Poll `probe` until it yields a value or `within` elapses.
pub async fn eventually<T, F, Fut>(within: Duration, mut probe: F) -> Option<T>
where
    F: FnMut() -> Fut,
    Fut: Future<Output = Option<T>>,
{
    let start = Instant::now();
    loop {
        if let Some(v) = probe().await {
            return Some(v);
        }
        if start.elapsed() > within {
            return None;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

pub fn sensor(id: &str, kind: &str, temperature: f64, at: GeoPoint, ts: i64) -> ContextElement {
    ContextElement::new(
        EntityRef::new(id, kind),
        vec![
            Attribute::number("temperature", temperature, ts),
            Attribute::number("humidity", 40.0, ts),
            Attribute::geo("location", at, ts),
        ],
    )
}
