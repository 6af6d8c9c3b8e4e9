mod common;

use std::time::Duration;

use common::{eventually, Inbox};
use liots_core::clock::{system_clock, ManualClock, SharedClock};
use liots_core::discovery::{Discovery, DiscoveryConfig};
use liots_core::model::wire::{
    Ack, DiscoverResponse, RegisterResponse, SubscribeResponse, UnsubscribeRequest, DISCOVER_AVAILABILITY,
    REGISTER_CONTEXT, SUBSCRIBE_AVAILABILITY, UNSUBSCRIBE_AVAILABILITY,
};
use liots_core::model::{EntityRef, GeoPoint, GridCell, QueryRequest, Registration, Scope, Subscription};
use liots_core::net::{bind_loopback, serve, ServiceHandle, WireClient};

async fn start(config: DiscoveryConfig, clock: SharedClock) -> (Discovery, ServiceHandle) {
    let (listener, endpoint) = bind_loopback().await.unwrap();
    let discovery = Discovery::new(&config, WireClient::new(), clock);
    let handle = serve(listener, endpoint, discovery.router());
    (discovery, handle)
}

fn reg(id: &str, version: u64, provider: &str, ty: &str, attrs: &[&str]) -> Registration {
    Registration {
        registration_id: id.into(),
        version,
        providing_endpoint: provider.into(),
        entities: vec![EntityRef::pattern("*", ty)],
        attribute_names: attrs.iter().map(|s| s.to_string()).collect(),
        scope: Scope::None,
        ttl: 600,
    }
}

async fn register(client: &WireClient, endpoint: &str, r: &Registration) -> Result<RegisterResponse, u16> {
    client.post(endpoint, REGISTER_CONTEXT, r, None).await.map_err(|e| e.code())
}

async fn discover(client: &WireClient, endpoint: &str, q: &QueryRequest) -> Vec<Registration> {
    let mut regs = client
        .post::<_, DiscoverResponse>(endpoint, DISCOVER_AVAILABILITY, q, None)
        .await
        .unwrap()
        .registrations;
    regs.sort_by(|a, b| a.registration_id.cmp(&b.registration_id));
    regs
}

fn of_type(ty: &str) -> QueryRequest {
    QueryRequest::new(vec![EntityRef::pattern("*", ty)], vec![])
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn versions_only_move_forward() {
    let (_d, service) = start(DiscoveryConfig::default(), system_clock()).await;
    let client = WireClient::new();
    let v1 = reg("r", 1, "http://p1:1", "Room", &[]);
    let v2 = reg("r", 2, "http://p2:1", "Room", &[]);
    assert_eq!(register(&client, &service.endpoint, &v1).await.unwrap().version, 1);
    assert_eq!(register(&client, &service.endpoint, &v2).await.unwrap().version, 2);
    assert_eq!(register(&client, &service.endpoint, &v1).await.unwrap_err(), 409);
    assert_eq!(discover(&client, &service.endpoint, &of_type("Room")).await, vec![v2.clone()]);

    let mut bad = v2.clone();
    bad.version = 0;
    assert_eq!(register(&client, &service.endpoint, &bad).await.unwrap_err(), 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn discover_filters_by_type_attributes_and_scope() {
    let (_d, service) = start(DiscoveryConfig::default(), system_clock()).await;
    let client = WireClient::new();
    let cell = |lat, lon| Scope::GridCell(GridCell { lat_index: lat, lon_index: lon, cell_size: 0.1 });
    let mut near = reg("near", 1, "http://near:1", "Room", &["temperature"]);
    near.scope = cell(441, 98);
    let mut far = reg("far", 1, "http://far:1", "Room", &["temperature"]);
    far.scope = cell(100, 100);
    let humid = reg("humid", 1, "http://humid:1", "Room", &["humidity"]);
    let cars = reg("cars", 1, "http://cars:1", "Car", &[]);
    for r in [&near, &far, &humid, &cars] {
        register(&client, &service.endpoint, r).await.unwrap();
    }
    let mut q = QueryRequest::new(vec![EntityRef::pattern("*", "Room")], vec!["temperature".into()]);
    assert_eq!(discover(&client, &service.endpoint, &q).await, vec![far.clone(), near.clone()]);
    q.scope = Some(Scope::ExactPoint(GeoPoint::new(44.105, 9.85)));
    assert_eq!(discover(&client, &service.endpoint, &q).await, vec![near]);
    assert_eq!(discover(&client, &service.endpoint, &of_type("Car")).await, vec![cars]);
    assert!(discover(&client, &service.endpoint, &of_type("Bike")).await.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn availability_subscribers_hear_current_and_later_registrations() {
    let (_d, service) = start(DiscoveryConfig::default(), system_clock()).await;
    let client = WireClient::new();
    let mut inbox = Inbox::start().await;
    let early = reg("early", 1, "http://a:1", "Room", &[]);
    register(&client, &service.endpoint, &early).await.unwrap();

    let sub = Subscription::availability(vec![EntityRef::pattern("*", "Room")], vec![], inbox.endpoint(), 600);
    let SubscribeResponse { subscription_id } =
        client.post(&service.endpoint, SUBSCRIBE_AVAILABILITY, &sub, None).await.unwrap();
    let first = tokio::time::timeout(Duration::from_secs(5), inbox.availability.recv()).await.unwrap().unwrap();
    assert_eq!(first.subscription_id, subscription_id);
    assert_eq!(first.registrations, vec![early]);

    register(&client, &service.endpoint, &reg("car", 1, "http://c:1", "Car", &[])).await.unwrap();
    let late = reg("late", 1, "http://b:1", "Room", &[]);
    register(&client, &service.endpoint, &late).await.unwrap();
    let next = tokio::time::timeout(Duration::from_secs(5), inbox.availability.recv()).await.unwrap().unwrap();
    assert_eq!(next.registrations, vec![late.clone()]);

    // withdrawal reaches subscribers as a tombstone
    let mut gone = late.clone();
    gone.version = 2;
    gone.ttl = 0;
    register(&client, &service.endpoint, &gone).await.unwrap();
    let withdrawn = tokio::time::timeout(Duration::from_secs(5), inbox.availability.recv()).await.unwrap().unwrap();
    assert!(withdrawn.registrations[0].is_tombstone());
    assert_eq!(discover(&client, &service.endpoint, &of_type("Room")).await.len(), 1);

    let stop = UnsubscribeRequest { subscription_id };
    client.post::<_, Ack>(&service.endpoint, UNSUBSCRIBE_AVAILABILITY, &stop, None).await.unwrap();
    assert_eq!(
        client.post::<_, Ack>(&service.endpoint, UNSUBSCRIBE_AVAILABILITY, &stop, None).await.unwrap_err().code(),
        404
    );
    register(&client, &service.endpoint, &reg("later", 1, "http://d:1", "Room", &[])).await.unwrap();
    assert!(tokio::time::timeout(Duration::from_millis(300), inbox.availability.recv()).await.is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn registrations_expire_after_their_ttl() {
    let clock = ManualClock::starting_at(0);
    let (d, service) = start(DiscoveryConfig::default(), clock.clone()).await;
    let client = WireClient::new();
    let mut short = reg("short", 1, "http://a:1", "Room", &[]);
    short.ttl = 5;
    register(&client, &service.endpoint, &short).await.unwrap();
    register(&client, &service.endpoint, &reg("long", 1, "http://b:1", "Room", &[])).await.unwrap();
    clock.advance_secs(6);
    let left = discover(&client, &service.endpoint, &of_type("Room")).await;
    assert_eq!(left.len(), 1);
    assert_eq!(left[0].registration_id, "long");
    assert_eq!(d.sweep(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn replicas_converge_including_withdrawals() {
    let mut bound = Vec::new();
    for _ in 0..3 {
        bound.push(bind_loopback().await.unwrap());
    }
    let endpoints: Vec<String> = bound.iter().map(|(_, e)| e.clone()).collect();
    let mut replicas = Vec::new();
    let mut handles = Vec::new();
    for (i, (listener, endpoint)) in bound.into_iter().enumerate() {
        let config = DiscoveryConfig {
            origin: format!("m{i}"),
            peers: endpoints.iter().filter(|e| **e != endpoint).cloned().collect(),
            ..DiscoveryConfig::default()
        };
        let d = Discovery::new(&config, WireClient::new(), system_clock());
        handles.push(serve(listener, endpoint, d.router()));
        replicas.push(d);
    }
    let client = WireClient::new();
    for i in 0..30u64 {
        let target = &endpoints[(i % 3) as usize];
        register(&client, target, &reg(&format!("r{i:02}"), 1, "http://p:1", "Room", &[])).await.unwrap();
    }
    // same id written at two replicas: the higher version wins everywhere
    register(&client, &endpoints[0], &reg("r00", 2, "http://winner:1", "Room", &[])).await.unwrap();
    let mut gone = reg("r05", 2, "http://p:1", "Room", &[]);
    gone.ttl = 0;
    register(&client, &endpoints[1], &gone).await.unwrap();

    for d in &replicas {
        assert!(d.replicator().unwrap().quiesce(Duration::from_secs(10)).await);
    }
    let views = eventually(Duration::from_secs(10), || async {
        let views: Vec<Vec<Registration>> = replicas.iter().map(|d| d.live()).collect();
        (views.iter().all(|v| *v == views[0]) && views[0].len() == 29).then_some(views)
    })
    .await
    .expect("replicas converge");
    let winner = views[0].iter().find(|r| r.registration_id == "r00").unwrap();
    assert_eq!(winner.providing_endpoint, "http://winner:1");
    assert!(views[0].iter().all(|r| r.registration_id != "r05"));

    // a stale version replayed at any replica is refused
    assert_eq!(
        register(&client, &endpoints[2], &reg("r05", 1, "http://p:1", "Room", &[])).await.unwrap_err(),
        409
    );
}
