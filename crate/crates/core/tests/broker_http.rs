mod common;

use std::time::{Duration, Instant};

use common::{eventually, sensor, Inbox};
use liots_core::broker::{Broker, BrokerConfig, BrokerRole};
use liots_core::clock::system_clock;
use liots_core::cm::{CmConfig, ContextManager};
use liots_core::discovery::{Discovery, DiscoveryConfig};
use liots_core::model::wire::{
    Ack, RegisterResponse, SubscribeResponse, UnsubscribeRequest, QUERY_CONTEXT, REGISTER_CONTEXT, SUBSCRIBE_CONTEXT,
    UNSUBSCRIBE_CONTEXT,
};
use liots_core::model::{
    AggregateMode, Attribute, ContextElement, EntityRef, GeoPoint, QueryRequest, QueryResponse, Registration, Scope,
    Subscription,
};
use liots_core::net::{bind_loopback, serve, serve_loopback, ServiceHandle, WireClient};

struct Domain {
    discovery: ServiceHandle,
    broker: Broker,
    broker_service: ServiceHandle,
    cms: Vec<(ContextManager, ServiceHandle)>,
    client: WireClient,
}

impl Domain {
    async fn start(providers: usize, delay_ms: u64) -> Self {
        let client = WireClient::new();
        let discovery = serve_loopback(Discovery::new(&DiscoveryConfig::default(), client.clone(), system_clock()).router())
            .await
            .unwrap();
        let (listener, endpoint) = bind_loopback().await.unwrap();
        let broker = Broker::new(
            &BrokerConfig::new(BrokerRole::Intra, &discovery.endpoint),
            &endpoint,
            client.clone(),
            system_clock(),
        );
        let broker_service = serve(listener, endpoint, broker.router());
        let mut domain = Self {
            discovery,
            broker,
            broker_service,
            cms: Vec::new(),
            client,
        };
        for _ in 0..providers {
            domain.add_cm(delay_ms).await;
        }
        domain
    }

    async fn add_cm(&mut self, delay_ms: u64) -> usize {
        let (listener, endpoint) = bind_loopback().await.unwrap();
        let cm = ContextManager::new(
            &CmConfig {
                announce_targets: vec![self.discovery.endpoint.clone()],
                service_delay_ms: delay_ms,
                ..CmConfig::default()
            },
            &endpoint,
            self.client.clone(),
            system_clock(),
        )
        .unwrap();
        let handle = serve(listener, endpoint, cm.router());
        self.cms.push((cm, handle));
        self.cms.len() - 1
    }

    async fn publish(&self, cm: usize, elements: Vec<ContextElement>) {
        let cm = &self.cms[cm].0;
        cm.publish(elements).unwrap();
        assert!(cm.announce_now().await);
    }

    async fn query(&self, q: &QueryRequest) -> QueryResponse {
        self.client.post(&self.broker_service.endpoint, QUERY_CONTEXT, q, None).await.unwrap()
    }
}

fn room(id: &str, temperature: f64) -> ContextElement {
    sensor(id, "Room", temperature, GeoPoint::new(44.0, 9.0), 1)
}

fn every_room() -> QueryRequest {
    QueryRequest::new(vec![EntityRef::pattern("*", "Room")], vec![])
}

fn ids(r: &QueryResponse) -> Vec<String> {
    r.context_elements.iter().map(|e| e.entity.id.clone()).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn answer_is_the_union_of_disjoint_providers() {
    let domain = Domain::start(3, 0).await;
    let mut expected = Vec::new();
    for (i, _) in domain.cms.iter().enumerate() {
        let part: Vec<ContextElement> = (0..5).map(|j| room(&format!("p{i}-r{j}"), (i * 10 + j) as f64)).collect();
        expected.extend(part.clone());
        domain.publish(i, part).await;
    }
    expected.sort_by(|a, b| a.entity.id.cmp(&b.entity.id));
    for e in &mut expected {
        e.attributes.sort_by(|a, b| a.name.cmp(&b.name));
    }
    let got = domain.query(&every_room()).await;
    assert!(got.annotations.is_empty());
    let mut got = got.context_elements;
    for e in &mut got {
        e.provider_hint = None;
    }
    assert_eq!(got, expected);

    // attribute narrowing is applied by the providers and preserved
    let only_temp = domain
        .query(&QueryRequest::new(vec![EntityRef::new("p1-r2", "Room")], vec!["temperature".into()]))
        .await;
    assert_eq!(only_temp.context_elements.len(), 1);
    assert_eq!(only_temp.context_elements[0].attributes.len(), 1);
    assert_eq!(only_temp.context_elements[0].attributes[0].value.as_number(), Some(12.0));

    assert!(domain.query(&QueryRequest::new(vec![EntityRef::pattern("*", "Bike")], vec![])).await.context_elements.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unreachable_provider_yields_partial_answer_with_annotation() {
    let mut domain = Domain::start(2, 0).await;
    domain.publish(0, vec![room("alive", 1.0)]).await;
    domain.publish(1, vec![room("dead", 2.0)]).await;
    assert_eq!(domain.query(&every_room()).await.context_elements.len(), 2);

    let (_, handle) = domain.cms.remove(1);
    let dead_endpoint = handle.endpoint.clone();
    handle.stop();
    let partial = domain.query(&every_room()).await;
    assert_eq!(ids(&partial), ["alive"]);
    assert_eq!(partial.annotations.len(), 1);
    assert!(partial.annotations[0].source.starts_with(dead_endpoint.trim_end_matches('/')));
    assert!(partial.annotations[0].code >= 500);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn providers_are_queried_in_parallel() {
    const DELAY_MS: u64 = 300;
    let domain = Domain::start(4, DELAY_MS).await;
    for i in 0..4 {
        domain.publish(i, vec![room(&format!("r{i}"), 0.0)]).await;
    }
    domain.query(&every_room()).await;
    let start = Instant::now();
    let got = domain.query(&every_room()).await;
    let took = start.elapsed();
    assert_eq!(got.context_elements.len(), 4);
    assert!(took < Duration::from_millis(2 * DELAY_MS), "{took:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn provider_registered_twice_is_called_once() {
    let domain = Domain::start(1, 0).await;
    domain.publish(0, vec![room("r1", 5.0)]).await;
    let provider = domain.cms[0].1.endpoint.clone();
    let extra = Registration {
        registration_id: "manual".into(),
        version: 1,
        providing_endpoint: format!("{provider}/"),
        entities: vec![EntityRef::pattern("*", "Room")],
        attribute_names: vec![],
        scope: Scope::None,
        ttl: 600,
    };
    let _: RegisterResponse = domain
        .client
        .post(&domain.discovery.endpoint, REGISTER_CONTEXT, &extra, None)
        .await
        .unwrap();
    let before = domain.cms[0].0.stats().queries.load(std::sync::atomic::Ordering::Relaxed);
    let got = domain.query(&every_room()).await;
    assert_eq!(ids(&got), ["r1"]);
    let after = domain.cms[0].0.stats().queries.load(std::sync::atomic::Ordering::Relaxed);
    assert_eq!(after - before, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn average_mode_combines_providers() {
    let domain = Domain::start(2, 0).await;
    let reading = |v: f64| ContextElement::new(EntityRef::new("shared", "Room"), vec![Attribute::number("temperature", v, 1)]);
    domain.publish(0, vec![reading(10.0)]).await;
    domain.publish(1, vec![reading(30.0)]).await;
    let mut q = QueryRequest::new(vec![EntityRef::pattern("*", "Room")], vec!["temperature".into()]);
    q.aggregate = AggregateMode::Average;
    let avg = domain.query(&q).await;
    assert_eq!(avg.context_elements.len(), 1);
    assert_eq!(avg.context_elements[0].attributes[0].value.as_number(), Some(20.0));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn subscription_follows_existing_and_new_providers() {
    let mut domain = Domain::start(1, 0).await;
    domain.publish(0, vec![room("r0", 1.0)]).await;
    let mut inbox = Inbox::start().await;
    let sub = Subscription::context(vec![EntityRef::pattern("*", "Room")], vec!["temperature".into()], inbox.endpoint(), 600);
    let SubscribeResponse { subscription_id } = domain
        .client
        .post(&domain.broker_service.endpoint, SUBSCRIBE_CONTEXT, &sub, None)
        .await
        .unwrap();
    let first = inbox.next_context(Duration::from_secs(5)).await.expect("initial state");
    assert_eq!(first.subscription_id, subscription_id);
    assert_eq!(first.context_elements[0].entity.id, "r0");

    // a provider that appears later is subscribed through availability
    let late = domain.add_cm(0).await;
    domain.publish(late, vec![room("late", 2.0)]).await;
    let seen = eventually(Duration::from_secs(10), || {
        let n = inbox.context.try_recv().ok();
        async move { n.filter(|n| n.context_elements.iter().any(|e| e.entity.id == "late")) }
    })
    .await
    .expect("notification from the late provider");
    assert_eq!(seen.subscription_id, subscription_id);
    assert!(seen.context_elements.iter().all(|e| e.attributes.iter().all(|a| a.name == "temperature")));
    assert_eq!(domain.broker.active_subscriptions(), 1);

    let stop = UnsubscribeRequest { subscription_id };
    let _: Ack = domain
        .client
        .post(&domain.broker_service.endpoint, UNSUBSCRIBE_CONTEXT, &stop, None)
        .await
        .unwrap();
    assert_eq!(domain.broker.active_subscriptions(), 0);
    while inbox.context.try_recv().is_ok() {}
    domain.publish(0, vec![room("r0", 9.0)]).await;
    assert!(inbox.next_context(Duration::from_millis(400)).await.is_none());
}
