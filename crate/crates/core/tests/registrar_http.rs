mod common;

use std::time::Duration;

use common::eventually;
use liots_core::clock::system_clock;
use liots_core::discovery::{Discovery, DiscoveryConfig};
use liots_core::model::wire::{RegisterResponse, REGISTER_CONTEXT};
use liots_core::model::{EntityRef, GeoPoint, GridCell, Registration, Scope};
use liots_core::net::{bind_loopback, serve, serve_loopback, ServiceHandle, WireClient};
use liots_core::registrar::{PrivacyDirective, Registrar, RegistrarConfig};

const IN_FED_BROKER: &str = "http://in-fed-broker.example:9000";
const WAIT: Duration = Duration::from_secs(10);

struct Setup {
    id_discovery: Discovery,
    id_service: ServiceHandle,
    fed_discovery: Discovery,
    _fed_service: ServiceHandle,
    registrar_service: ServiceHandle,
    _task: tokio::task::JoinHandle<()>,
    _dir: tempfile::TempDir,
    directives_path: std::path::PathBuf,
}

impl Drop for Setup {
    fn drop(&mut self) {
        self._task.abort();
    }
}

async fn setup(directives: &[PrivacyDirective]) -> Setup {
    let client = WireClient::new();
    let id_discovery = Discovery::new(&DiscoveryConfig::default(), client.clone(), system_clock());
    let id_service = serve_loopback(id_discovery.router()).await.unwrap();
    let fed_discovery = Discovery::new(&DiscoveryConfig::default(), client.clone(), system_clock());
    let fed_service = serve_loopback(fed_discovery.router()).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let directives_path = dir.path().join("directives.json");
    std::fs::write(&directives_path, serde_json::to_vec(directives).unwrap()).unwrap();
    let config = RegistrarConfig {
        id_discovery_endpoint: Some(id_service.endpoint.clone()),
        directives_path: Some(directives_path.clone()),
        tick_ms: 50,
        ..RegistrarConfig::new(&fed_service.endpoint, IN_FED_BROKER)
    };
    let (listener, endpoint) = bind_loopback().await.unwrap();
    let registrar = Registrar::new(&config, &endpoint, client, system_clock()).unwrap();
    let registrar_service = serve(listener, endpoint, registrar.router());
    let task = registrar.spawn();
    Setup {
        id_discovery,
        id_service,
        fed_discovery,
        _fed_service: fed_service,
        registrar_service,
        _task: task,
        _dir: dir,
        directives_path,
    }
}

fn sensor(id: &str, version: u64, lat: f64, lon: f64) -> Registration {
    Registration {
        registration_id: format!("src-{id}"),
        version,
        providing_endpoint: "http://10.0.0.7:7001".into(),
        entities: vec![EntityRef::new(id, "Temperature")],
        attribute_names: vec!["value".into()],
        scope: Scope::ExactPoint(GeoPoint::new(lat, lon)),
        ttl: 600,
    }
}

fn cell(lat_index: i64, lon_index: i64, cell_size: f64) -> Scope {
    Scope::GridCell(GridCell { lat_index, lon_index, cell_size })
}

/// Wait until the federation view holds exactly these scopes.
async fn fed_scopes(s: &Setup, want: &[Scope]) -> Vec<Registration> {
    eventually(WAIT, || async {
        let live = s.fed_discovery.live();
        let mut scopes: Vec<String> = live.iter().map(|r| format!("{:?}", r.scope)).collect();
        let mut expected: Vec<String> = want.iter().map(|s| format!("{s:?}")).collect();
        scopes.sort();
        expected.sort();
        (scopes == expected).then_some(live)
    })
    .await
    .unwrap_or_else(|| panic!("federation view never became {want:?}: {:?}", s.fed_discovery.live()))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn intra_registrations_become_coarse_federation_entries() {
    let s = setup(&[PrivacyDirective::by_type_and_grid("Temperature", 0.1)]).await;
    s.id_discovery.register(sensor("t1", 1, 44.101, 9.823)).unwrap();
    let regs = fed_scopes(&s, &[cell(441, 98, 0.1)]).await;
    let published = &regs[0];
    assert_eq!(published.providing_endpoint, IN_FED_BROKER);
    assert_eq!(published.entities, vec![EntityRef::pattern("*", "Temperature")]);
    let json = serde_json::to_string(published).unwrap();
    assert!(!json.contains("t1") && !json.contains("10.0.0.7") && !json.contains("44.101"));
    let version = published.version;

    // a neighbour in the same cell changes nothing outside the domain
    s.id_discovery.register(sensor("t2", 1, 44.102, 9.824)).unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    let regs = fed_scopes(&s, &[cell(441, 98, 0.1)]).await;
    assert_eq!(regs[0].version, version);

    s.id_discovery.register(sensor("t3", 1, 45.0, 9.0)).unwrap();
    fed_scopes(&s, &[cell(441, 98, 0.1), cell(450, 90, 0.1)]).await;

    // the cell disappears only once every sensor in it is withdrawn
    let mut gone = sensor("t1", 2, 44.101, 9.823);
    gone.ttl = 0;
    s.id_discovery.register(gone).unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    fed_scopes(&s, &[cell(441, 98, 0.1), cell(450, 90, 0.1)]).await;
    let mut gone = sensor("t2", 2, 44.102, 9.824);
    gone.ttl = 0;
    s.id_discovery.register(gone).unwrap();
    fed_scopes(&s, &[cell(450, 90, 0.1)]).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn providers_may_register_with_the_registrar_directly() {
    let s = setup(&[PrivacyDirective::by_type_and_grid("Temperature", 0.1)]).await;
    let client = WireClient::new();
    let _: RegisterResponse = client
        .post(&s.registrar_service.endpoint, REGISTER_CONTEXT, &sensor("direct", 1, 10.05, 20.05), None)
        .await
        .unwrap();
    fed_scopes(&s, &[cell(100, 200, 0.1)]).await;
    assert!(s.id_discovery.live().is_empty());
    assert_eq!(WireClient::new().get_status(&s.id_service.endpoint).await.unwrap(), 200);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn directive_file_changes_are_picked_up() {
    let s = setup(&[PrivacyDirective::by_type_and_grid("Temperature", 0.1)]).await;
    s.id_discovery.register(sensor("t1", 1, 44.101, 9.823)).unwrap();
    fed_scopes(&s, &[cell(441, 98, 0.1)]).await;

    tokio::time::sleep(Duration::from_millis(20)).await;
    std::fs::write(
        &s.directives_path,
        serde_json::to_vec(&[PrivacyDirective::by_type_and_grid("Temperature", 1.0)]).unwrap(),
    )
    .unwrap();
    fed_scopes(&s, &[cell(44, 9, 1.0)]).await;

    // an invalid file keeps the last good set
    std::fs::write(&s.directives_path, b"[{\"matchTypes\": 3}]").unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    fed_scopes(&s, &[cell(44, 9, 1.0)]).await;

    // no matching directive: nothing is shared
    std::fs::write(&s.directives_path, b"[]").unwrap();
    fed_scopes(&s, &[]).await;
}
