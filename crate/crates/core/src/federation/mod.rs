//! Wiring of components into domains, federations of domains, and
//! super-domains whose members are whole federations.
//!
//! Every federation runs one discovery replica and one authority replica
//! per member, plus an uplink pair. A super-domain adopts its members'
//! uplink pair as its own intra-domain discovery and authority, so the
//! members' boundary brokers act as its providers.

mod spec;

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use spec::{
    BoundarySecurity, DiscoveryRow, DiscoveryTarget, DomainSpec, FederationSpec, ProviderSpec, RegistrationRow,
    SecurityRow, SecurityScope, SpecViolation, SubscriptionRow, Wiring,
};

use crate::broker::{Broker, BrokerConfig, BrokerRole};
use crate::clock::{system_clock, SharedClock};
use crate::cm::{CmConfig, ContextManager};
use crate::discovery::{Discovery, DiscoveryConfig};
use crate::model::{EntityRef, Registration, Scope};
use crate::net::{bind_loopback, serve, ServiceHandle, WireClient, WireRecord, WireTap};
use crate::registrar::{PrivacyDirective, Registrar, RegistrarConfig, RegistrarError};
use crate::security::{
    fresh_token_value, Action, Authority, AuthorityConfig, AuthorityError, Identity, IdentityKind, IdmError, Pep,
    PepConfig, Policy,
};

/// Lifetime of the boundary broker's catch-all registration (ten years).
const CATCH_ALL_TTL: u64 = 10 * 365 * 24 * 3600;

#[derive(Debug, thiserror::Error)]
pub enum AssemblyError {
    #[error(transparent)]
    Spec(#[from] SpecViolation),
    #[error("binding a listener: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Authority(#[from] AuthorityError),
    #[error(transparent)]
    Identity(#[from] IdmError),
    #[error(transparent)]
    Registrar(#[from] RegistrarError),
    #[error("{0}")]
    Config(String),
}

#[derive(Clone)]
pub struct AssemblyOptions {
    /// Record every outgoing call, labelled with the calling domain.
    pub tap: Option<WireTap>,
    pub clock: SharedClock,
    pub client: WireClient,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            tap: None,
            clock: system_clock(),
            client: WireClient::new(),
        }
    }
}

impl AssemblyOptions {
    pub fn tapped(tap: WireTap) -> Self {
        Self {
            tap: Some(tap),
            ..Self::default()
        }
    }
}

struct Ctx {
    options: AssemblyOptions,
    owners: RwLock<HashMap<String, String>>,
}

impl Ctx {
    fn client(&self, domain: &str) -> WireClient {
        match &self.options.tap {
            Some(tap) => self.options.client.tapped(tap.clone(), domain),
            None => self.options.client.clone(),
        }
    }

    fn claim(&self, endpoint: &str, domain: &str) {
        self.owners.write().insert(endpoint_key(endpoint), domain.to_owned());
    }

    fn owner_of(&self, url: &str) -> Option<String> {
        self.owners.read().get(&endpoint_key(url)).cloned()
    }
}

fn endpoint_key(url: &str) -> String {
    match url::Url::parse(url) {
        Ok(u) => format!("{}:{}", u.host_str().unwrap_or_default(), u.port_or_known_default().unwrap_or(0)),
        Err(_) => url.to_owned(),
    }
}

struct Slot {
    listener: TcpListener,
    endpoint: String,
}

async fn slot() -> std::io::Result<Slot> {
    let (listener, endpoint) = bind_loopback().await?;
    Ok(Slot { listener, endpoint })
}

/// Background tasks aborted when dropped.
#[derive(Default)]
struct Tasks(Vec<JoinHandle<()>>);

impl Tasks {
    fn push(&mut self, task: JoinHandle<()>) {
        self.0.push(task);
    }
}

impl Drop for Tasks {
    fn drop(&mut self) {
        for t in &self.0 {
            t.abort();
        }
    }
}

/// One replica of the federation discovery and federation authority.
pub struct FederationReplica {
    pub owner: String,
    pub discovery: Discovery,
    pub discovery_endpoint: String,
    pub authority: Authority,
    pub authority_endpoint: String,
    _services: Vec<ServiceHandle>,
    _tasks: Tasks,
}

impl FederationReplica {
    async fn quiesce(&self, timeout: Duration) -> bool {
        let mut ok = true;
        if let Some(r) = self.discovery.replicator() {
            ok &= r.quiesce(timeout).await;
        }
        if let Some(r) = self.authority.replicator() {
            ok &= r.quiesce(timeout).await;
        }
        ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DomainEndpoints {
    pub domain_id: String,
    pub secured: bool,
    /// Where applications send requests.
    pub id_broker: String,
    pub intra_discovery: String,
    pub fed_discovery: String,
    pub out_fed_broker: String,
    pub out_fed_broker_federation: String,
    pub in_fed_broker: String,
    pub in_fed_broker_intra: String,
    pub registrar: String,
    pub providers: BTreeMap<String, String>,
    pub intra_authority: String,
    pub fed_authority: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdomains: Option<FederationStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplicaStatus {
    pub owner: String,
    pub discovery: String,
    pub authority: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FederationStatus {
    pub federation_id: String,
    pub domains: Vec<DomainEndpoints>,
    pub replicas: Vec<ReplicaStatus>,
}

/// A running domain. Dropping it stops every service it owns.
pub struct DomainHandle {
    pub domain_id: String,
    pub secured: bool,
    pub endpoints: DomainEndpoints,
    pub providers: BTreeMap<String, ContextManager>,
    pub id_broker: Broker,
    pub out_fed_broker: Broker,
    pub in_fed_broker: Broker,
    pub registrar: Registrar,
    pub intra_discovery: Discovery,
    pub fed_discovery: Discovery,
    pub intra_authority: Authority,
    pub fed_authority: Authority,
    /// Enforcement points by the component they guard.
    pub peps: BTreeMap<String, Pep>,
    pub subdomains: Option<Box<FederationHandle>>,
    intra_subjects: Vec<String>,
    user_secrets: HashMap<String, String>,
    _services: Vec<ServiceHandle>,
    _tasks: Tasks,
    _own_federation: Option<Box<FederationReplica>>,
}

impl std::fmt::Debug for DomainHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DomainHandle").field("domain_id", &self.domain_id).finish()
    }
}

impl DomainHandle {
    /// Endpoint applications use (the intra broker, behind its PEP when
    /// secured).
    pub fn app_endpoint(&self) -> &str {
        &self.endpoints.id_broker
    }

    pub fn provider(&self, name: &str) -> Option<&ContextManager> {
        self.providers.get(name)
    }

    /// Token of an application identity declared in the spec.
    pub fn user_token(&self, subject_id: &str) -> Result<String, IdmError> {
        let secret = self
            .user_secrets
            .get(subject_id)
            .ok_or(IdmError::BadCredentials)?;
        Ok(self.intra_authority.issue_token(subject_id, secret)?.value)
    }

    /// Subject ids of this domain's own scope: components and users.
    pub fn intra_subjects(&self) -> &[String] {
        &self.intra_subjects
    }
}

/// A running federation, possibly with super-domains among its members.
pub struct FederationHandle {
    pub federation_id: String,
    pub members: Vec<DomainHandle>,
    pub replicas: Vec<FederationReplica>,
    uplink: Option<FederationReplica>,
    ctx: Arc<Ctx>,
}

impl std::fmt::Debug for FederationHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FederationHandle")
            .field("federation_id", &self.federation_id)
            .field("members", &self.members)
            .finish()
    }
}

impl FederationHandle {
    /// Find a domain anywhere in the tree.
    pub fn domain(&self, domain_id: &str) -> Option<&DomainHandle> {
        self.members.iter().find_map(|m| {
            if m.domain_id == domain_id {
                Some(m)
            } else {
                m.subdomains.as_ref().and_then(|s| s.domain(domain_id))
            }
        })
    }

    /// Every domain in the tree, parents before members.
    pub fn all_domains(&self) -> Vec<&DomainHandle> {
        let mut out = Vec::new();
        for m in &self.members {
            out.push(m);
            if let Some(s) = &m.subdomains {
                out.extend(s.all_domains());
            }
        }
        out
    }

    fn all_replicas(&self) -> Vec<&FederationReplica> {
        let mut out: Vec<&FederationReplica> = self.replicas.iter().chain(self.uplink.iter()).collect();
        for m in &self.members {
            if let Some(s) = &m.subdomains {
                out.extend(s.all_replicas());
            }
        }
        out
    }

    /// Wait until every replication queue in the tree is drained.
    pub async fn quiesce(&self, timeout: Duration) -> bool {
        let mut ok = true;
        for r in self.all_replicas() {
            ok &= r.quiesce(timeout).await;
        }
        ok
    }

    pub fn status(&self) -> FederationStatus {
        FederationStatus {
            federation_id: self.federation_id.clone(),
            domains: self.members.iter().map(|m| m.endpoints.clone()).collect(),
            replicas: self
                .replicas
                .iter()
                .map(|r| ReplicaStatus {
                    owner: r.owner.clone(),
                    discovery: r.discovery_endpoint.clone(),
                    authority: r.authority_endpoint.clone(),
                })
                .collect(),
        }
    }

    pub fn tap(&self) -> Option<&WireTap> {
        self.ctx.options.tap.as_ref()
    }

    /// Domain owning the service a URL points at.
    pub fn domain_of(&self, url: &str) -> Option<String> {
        self.ctx.owner_of(url)
    }

    /// Declare that an endpoint outside the assembly (an application
    /// callback, say) belongs to a domain.
    pub fn claim_endpoint(&self, endpoint: &str, domain_id: &str) {
        self.ctx.claim(endpoint, domain_id);
    }

    /// A client whose calls are recorded as made from inside `domain_id`.
    pub fn client_for(&self, domain_id: &str) -> WireClient {
        self.ctx.client(domain_id)
    }

    /// Captured calls whose destination is not owned by the calling
    /// domain. Calls to unknown endpoints count as cross-domain.
    pub fn cross_domain_records(&self) -> Vec<WireRecord> {
        let Some(tap) = self.tap() else {
            return Vec::new();
        };
        tap.records()
            .into_iter()
            .filter(|r| self.ctx.owner_of(&r.url).as_deref() != Some(r.origin.as_str()))
            .collect()
    }
}

type Boxed<'a, T> = Pin<Box<dyn Future<Output = Result<T, AssemblyError>> + Send + 'a>>;

/// Start a federation (and any super-domains within it) in this process.
pub async fn assemble_federation(
    spec: &FederationSpec,
    options: AssemblyOptions,
) -> Result<FederationHandle, AssemblyError> {
    spec.validate()?;
    let ctx = Arc::new(Ctx {
        options,
        owners: RwLock::new(HashMap::new()),
    });
    let handle = build_federation(spec, ctx).await?;
    handle.quiesce(Duration::from_secs(10)).await;
    Ok(handle)
}

/// Start a single domain with its own, unreplicated federation services.
pub async fn assemble_domain(spec: &DomainSpec, options: AssemblyOptions) -> Result<DomainHandle, AssemblyError> {
    spec.validate()?;
    let ctx = Arc::new(Ctx {
        options,
        owners: RwLock::new(HashMap::new()),
    });
    let mut replicas = start_replicas(std::slice::from_ref(&spec.domain_id), &[], &ctx).await?;
    let replica = replicas.remove(0);
    let mut handle = build_member(spec, &replica, ctx).await?;
    handle._own_federation = Some(Box::new(replica));
    Ok(handle)
}

/// Put a super-domain on top of a running federation. The result is a
/// one-member federation whose member is the super-domain.
pub async fn stack_super_domain(
    mut inner: FederationHandle,
    super_spec: &DomainSpec,
) -> Result<FederationHandle, AssemblyError> {
    let mut spec = super_spec.clone();
    spec.subdomains = None;
    spec.validate()?;
    if inner.domain(&spec.domain_id).is_some() {
        return Err(SpecViolation {
            violations: vec![format!("domain id {} is used more than once", spec.domain_id)],
        }
        .into());
    }
    let ctx = inner.ctx.clone();
    let replicas = start_replicas(std::slice::from_ref(&spec.domain_id), &[], &ctx).await?;
    let uplink = inner
        .uplink
        .take()
        .ok_or_else(|| AssemblyError::Config("federation already has a super-domain".into()))?;
    let member = build_domain(&spec, Scope_::Adopted(uplink, Box::new(inner)), &replicas[0], ctx.clone()).await?;
    let handle = FederationHandle {
        federation_id: format!("{}-top", spec.domain_id),
        members: vec![member],
        replicas,
        uplink: None,
        ctx,
    };
    handle.quiesce(Duration::from_secs(10)).await;
    Ok(handle)
}

fn build_federation(spec: &FederationSpec, ctx: Arc<Ctx>) -> Boxed<'_, FederationHandle> {
    Box::pin(async move {
        let mut owners: Vec<String> = spec.members.iter().map(|m| m.domain_id.clone()).collect();
        owners.push(spec.federation_id.clone());
        let mut replicas = start_replicas(&owners, &spec.policies, &ctx).await?;
        let uplink = replicas.pop();
        let mut members = Vec::new();
        for (member, replica) in spec.members.iter().zip(&replicas) {
            members.push(build_member(member, replica, ctx.clone()).await?);
        }
        Ok(FederationHandle {
            federation_id: spec.federation_id.clone(),
            members,
            replicas,
            uplink,
            ctx,
        })
    })
}

fn build_member<'a>(spec: &'a DomainSpec, replica: &'a FederationReplica, ctx: Arc<Ctx>) -> Boxed<'a, DomainHandle> {
    Box::pin(async move {
        match &spec.subdomains {
            Some(inner_spec) => {
                let mut inner = build_federation(inner_spec, ctx.clone()).await?;
                let uplink = inner.uplink.take().expect("fresh federation has an uplink");
                build_domain(spec, Scope_::Adopted(uplink, Box::new(inner)), replica, ctx).await
            }
            None => build_domain(spec, Scope_::Own, replica, ctx).await,
        }
    })
}

/// Replicas for one federation, `owners[i]` hosting replica i. Member
/// identities are the owners; the last owner may be an uplink label.
async fn start_replicas(
    owners: &[String],
    policies: &[Policy],
    ctx: &Arc<Ctx>,
) -> Result<Vec<FederationReplica>, AssemblyError> {
    let mut discovery_slots = Vec::new();
    let mut authority_slots = Vec::new();
    for _ in owners {
        discovery_slots.push(slot().await?);
        authority_slots.push(slot().await?);
    }
    let discovery_endpoints: Vec<String> = discovery_slots.iter().map(|s| s.endpoint.clone()).collect();
    let authority_endpoints: Vec<String> = authority_slots.iter().map(|s| s.endpoint.clone()).collect();
    let policies = if policies.is_empty() {
        vec![Policy::permit("federation-default", "*", Action::Any, "*")]
    } else {
        policies.to_vec()
    };
    let others = |all: &[String], i: usize| -> Vec<String> {
        all.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, e)| e.clone()).collect()
    };
    let mut out = Vec::new();
    for (i, (d_slot, a_slot)) in discovery_slots.into_iter().zip(authority_slots).enumerate() {
        let owner = &owners[i];
        let client = ctx.client(owner);
        let clock = ctx.options.clock.clone();
        let discovery = Discovery::new(
            &DiscoveryConfig {
                origin: owner.clone(),
                peers: others(&discovery_endpoints, i),
                ..DiscoveryConfig::default()
            },
            client.clone(),
            clock.clone(),
        );
        let authority = Authority::new(
            &AuthorityConfig {
                origin: owner.clone(),
                peers: others(&authority_endpoints, i),
                policies: policies.clone(),
                ..AuthorityConfig::default()
            },
            client,
            clock,
        )?;
        ctx.claim(&d_slot.endpoint, owner);
        ctx.claim(&a_slot.endpoint, owner);
        let mut tasks = Tasks::default();
        tasks.push(discovery.spawn_sweeper());
        let services = vec![
            serve(d_slot.listener, d_slot.endpoint.clone(), discovery.router()),
            serve(a_slot.listener, a_slot.endpoint.clone(), authority.router()),
        ];
        out.push(FederationReplica {
            owner: owner.clone(),
            discovery,
            discovery_endpoint: d_slot.endpoint,
            authority,
            authority_endpoint: a_slot.endpoint,
            _services: services,
            _tasks: tasks,
        });
    }
    Ok(out)
}

/// Where a domain's own security scope and intra discovery come from.
enum Scope_ {
    /// Fresh services owned by the domain.
    Own,
    /// The uplink replicas of the federation below a super-domain.
    Adopted(FederationReplica, Box<FederationHandle>),
}

const COMPONENTS: [&str; 6] = ["idB", "idD", "iotr", "outFedB", "inFedB", "fedD"];

fn subject(domain: &str, component: &str) -> String {
    format!("{domain}:{component}")
}

fn default_directives() -> Vec<PrivacyDirective> {
    vec![PrivacyDirective::by_type_and_grid("*", 0.1)]
}

async fn build_domain(
    spec: &DomainSpec,
    scope: Scope_,
    fed: &FederationReplica,
    ctx: Arc<Ctx>,
) -> Result<DomainHandle, AssemblyError> {
    let d = spec.domain_id.as_str();
    let client = ctx.client(d);
    let clock = ctx.options.clock.clone();
    let secured = spec.secured;
    let mut services = Vec::new();
    let mut tasks = Tasks::default();

    let mut component_ids: Vec<String> = COMPONENTS.iter().map(|c| subject(d, c)).collect();
    component_ids.extend(spec.providers.iter().map(|p| subject(d, &format!("cm-{}", p.name))));
    let component_secrets: HashMap<String, String> =
        component_ids.iter().map(|s| (s.clone(), fresh_token_value())).collect();
    let mut identities: Vec<Identity> = component_ids
        .iter()
        .map(|s| Identity::new(s.clone(), IdentityKind::Component, component_secrets[s].clone()))
        .collect();
    identities.extend(spec.users.iter().map(|u| Identity {
        kind: IdentityKind::User,
        ..u.clone()
    }));
    let mut policies = vec![Policy::permit("domain-components", &format!("{d}:*"), Action::Any, "*")];
    if spec.policies.is_empty() {
        policies.push(Policy::permit("domain-default", "*", Action::Any, "*"));
    } else {
        policies.extend(spec.policies.iter().cloned());
    }

    let (intra_authority, intra_authority_endpoint, intra_discovery, intra_discovery_raw, subdomains, adopted) =
        match scope {
            Scope_::Own => {
                let a_slot = slot().await?;
                let d_slot = slot().await?;
                let authority = Authority::new(
                    &AuthorityConfig {
                        origin: d.into(),
                        identities: identities.clone(),
                        policies,
                        ..AuthorityConfig::default()
                    },
                    client.clone(),
                    clock.clone(),
                )?;
                let discovery = Discovery::new(
                    &DiscoveryConfig {
                        origin: d.into(),
                        ..DiscoveryConfig::default()
                    },
                    client.clone(),
                    clock.clone(),
                );
                ctx.claim(&a_slot.endpoint, d);
                ctx.claim(&d_slot.endpoint, d);
                tasks.push(discovery.spawn_sweeper());
                services.push(serve(a_slot.listener, a_slot.endpoint.clone(), authority.router()));
                services.push(serve(d_slot.listener, d_slot.endpoint.clone(), discovery.router()));
                (authority, a_slot.endpoint, discovery, d_slot.endpoint, None, None)
            }
            Scope_::Adopted(uplink, inner) => {
                for identity in &identities {
                    uplink.authority.add_identity(identity)?;
                }
                let mut merged = policies;
                merged.extend(uplink.authority.policies());
                uplink.authority.set_policies(merged);
                ctx.claim(&uplink.discovery_endpoint, d);
                ctx.claim(&uplink.authority_endpoint, d);
                (
                    uplink.authority.clone(),
                    uplink.authority_endpoint.clone(),
                    uplink.discovery.clone(),
                    uplink.discovery_endpoint.clone(),
                    Some(inner),
                    Some(uplink),
                )
            }
        };

    let token_of = |component: &str| -> Result<Option<String>, AssemblyError> {
        if !secured {
            return Ok(None);
        }
        let s = subject(d, component);
        Ok(Some(intra_authority.issue_token(&s, &component_secrets[&s])?.value))
    };
    let fed_token = if secured {
        let secret = fresh_token_value();
        fed.authority
            .add_identity(&Identity::new(d, IdentityKind::Domain, secret.clone()))?;
        Some(fed.authority.issue_token(d, &secret)?.value)
    } else {
        None
    };

    // Raw service listeners.
    let id_b = slot().await?;
    let out_b = slot().await?;
    let in_b = slot().await?;
    let iotr = slot().await?;
    let mut cm_slots = Vec::new();
    for _ in &spec.providers {
        cm_slots.push(slot().await?);
    }

    // Enforcement points, created up front so every exposed address is known.
    let mut pep_slots: BTreeMap<String, Slot> = BTreeMap::new();
    if secured {
        for name in ["idB", "idD", "fedD", "iotr", "outFedB", "outFedB-federation", "inFedB", "inFedB-intra"] {
            pep_slots.insert(name.into(), slot().await?);
        }
        for p in &spec.providers {
            pep_slots.insert(format!("cm-{}", p.name), slot().await?);
        }
    }
    let exposed = |name: &str, raw: &str| -> String {
        pep_slots.get(name).map_or_else(|| raw.to_owned(), |s| s.endpoint.clone())
    };
    let e_idb = exposed("idB", &id_b.endpoint);
    let e_idd = exposed("idD", &intra_discovery_raw);
    let e_fedd = exposed("fedD", &fed.discovery_endpoint);
    let e_iotr = exposed("iotr", &iotr.endpoint);
    let e_out = exposed("outFedB", &out_b.endpoint);
    let e_out_fed = exposed("outFedB-federation", &out_b.endpoint);
    let e_in_fed = exposed("inFedB", &in_b.endpoint);
    let e_in_intra = exposed("inFedB-intra", &in_b.endpoint);
    let cm_exposed: Vec<String> = spec
        .providers
        .iter()
        .zip(&cm_slots)
        .map(|(p, s)| exposed(&format!("cm-{}", p.name), &s.endpoint))
        .collect();

    intra_discovery.set_token(token_of("idD")?);
    fed.discovery.set_token(token_of("fedD")?);

    let fanout = |mut cfg: BrokerConfig| {
        cfg.fanout_timeout_ms = spec.fanout_timeout_ms;
        cfg
    };
    let id_broker = Broker::new(
        &fanout(BrokerConfig {
            self_endpoint: Some(e_idb.clone()),
            availability_callback: Some(e_idb.clone()),
            token: token_of("idB")?,
            ..BrokerConfig::new(BrokerRole::Intra, e_idd.clone())
        }),
        &id_b.endpoint,
        client.clone(),
        clock.clone(),
    );
    let out_fed_broker = Broker::new(
        &fanout(BrokerConfig {
            self_endpoint: Some(e_out_fed.clone()),
            availability_callback: Some(e_out.clone()),
            token: token_of("outFedB")?,
            outbound_token: fed_token.clone(),
            exclude_providers: vec![e_in_fed.clone()],
            ..BrokerConfig::new(BrokerRole::OutFed, e_fedd.clone())
        }),
        &out_b.endpoint,
        client.clone(),
        clock.clone(),
    );
    let in_fed_broker = Broker::new(
        &fanout(BrokerConfig {
            self_endpoint: Some(e_in_intra.clone()),
            availability_callback: Some(e_in_intra.clone()),
            token: token_of("inFedB")?,
            outbound_token: fed_token.clone(),
            exclude_providers: vec![e_out.clone()],
            ..BrokerConfig::new(BrokerRole::InFed, e_idd.clone())
        }),
        &in_b.endpoint,
        client.clone(),
        clock.clone(),
    );
    let registrar = Registrar::new(
        &RegistrarConfig {
            id_discovery_endpoint: Some(e_idd.clone()),
            self_endpoint: Some(e_iotr.clone()),
            directives: if spec.directives.is_empty() {
                default_directives()
            } else {
                spec.directives.clone()
            },
            region_table: spec.region_table.clone(),
            ttl: spec.registration_ttl,
            token: token_of("iotr")?,
            exclude_providers: vec![e_out.clone()],
            tick_ms: spec.registrar_tick_ms,
            ..RegistrarConfig::new(&e_fedd, &e_in_fed)
        },
        &iotr.endpoint,
        client.clone(),
        clock.clone(),
    )?;

    let raw_idb = id_b.endpoint.clone();
    let raw_out = out_b.endpoint.clone();
    let raw_in = in_b.endpoint.clone();
    let raw_iotr = iotr.endpoint.clone();
    let mut raw_cms = HashMap::new();
    let mut providers = BTreeMap::new();
    let mut provider_endpoints = BTreeMap::new();
    for ((p, s), advertised) in spec.providers.iter().zip(cm_slots).zip(&cm_exposed) {
        let cm = ContextManager::new(
            &CmConfig {
                advertised_endpoint: Some(advertised.clone()),
                snapshot_path: p.snapshot_path.clone(),
                announce_targets: vec![e_idd.clone()],
                announce_mode: p.announce_mode,
                announce_ttl: p.announce_ttl,
                token: token_of(&format!("cm-{}", p.name))?,
                service_delay_ms: p.service_delay_ms,
                service_concurrency: p.service_concurrency,
                ..CmConfig::default()
            },
            &s.endpoint,
            client.clone(),
            clock.clone(),
        )?;
        ctx.claim(&s.endpoint, d);
        raw_cms.insert(format!("cm-{}", p.name), s.endpoint.clone());
        services.push(serve(s.listener, s.endpoint, cm.router()));
        provider_endpoints.insert(p.name.clone(), advertised.clone());
        providers.insert(p.name.clone(), cm);
    }

    for (s, router) in [
        (id_b, id_broker.router()),
        (out_b, out_fed_broker.router()),
        (in_b, in_fed_broker.router()),
        (iotr, registrar.router()),
    ] {
        ctx.claim(&s.endpoint, d);
        services.push(serve(s.listener, s.endpoint, router));
    }

    let mut peps = BTreeMap::new();
    for (name, s) in pep_slots {
        let (upstream, authority, allowed): (String, &str, Option<&[Action]>) = match name.as_str() {
            "idB" => (raw_idb.clone(), &intra_authority_endpoint, None),
            "idD" => (intra_discovery_raw.clone(), &intra_authority_endpoint, None),
            "fedD" => (fed.discovery_endpoint.clone(), &intra_authority_endpoint, None),
            "iotr" => (raw_iotr.clone(), &intra_authority_endpoint, None),
            "outFedB" => (
                raw_out.clone(),
                &intra_authority_endpoint,
                Some(&[Action::Query, Action::Subscribe, Action::Notify]),
            ),
            "outFedB-federation" => (
                raw_out.clone(),
                &fed.authority_endpoint,
                Some(&[Action::Notify]),
            ),
            "inFedB" => (
                raw_in.clone(),
                &fed.authority_endpoint,
                Some(&[Action::Query, Action::Subscribe]),
            ),
            "inFedB-intra" => (raw_in.clone(), &intra_authority_endpoint, Some(&[Action::Notify])),
            cm => (raw_cms[cm].clone(), &intra_authority_endpoint, None),
        };
        let mut config = PepConfig::new(&upstream, authority, authority);
        if let Some(actions) = allowed {
            config = config.allowing(actions);
        }
        let pep = Pep::new(&config, client.clone());
        ctx.claim(&s.endpoint, d);
        services.push(serve(s.listener, s.endpoint, pep.router()));
        peps.insert(name, pep);
    }

    // The boundary broker offers everything to the domain.
    intra_discovery
        .register(Registration {
            registration_id: String::new(),
            version: 1,
            providing_endpoint: e_out.clone(),
            entities: vec![EntityRef::any()],
            attribute_names: Vec::new(),
            scope: Scope::None,
            ttl: CATCH_ALL_TTL,
        })
        .map_err(|e| AssemblyError::Config(format!("catch-all registration: {e}")))?;

    tasks.push(registrar.spawn());
    for cm in providers.values() {
        if let Some(t) = cm.spawn_announcer() {
            tasks.push(t);
        }
    }

    let endpoints = DomainEndpoints {
        domain_id: d.into(),
        secured,
        id_broker: e_idb,
        intra_discovery: e_idd,
        fed_discovery: e_fedd,
        out_fed_broker: e_out,
        out_fed_broker_federation: e_out_fed,
        in_fed_broker: e_in_fed,
        in_fed_broker_intra: e_in_intra,
        registrar: e_iotr,
        providers: provider_endpoints,
        intra_authority: intra_authority_endpoint.clone(),
        fed_authority: fed.authority_endpoint.clone(),
        subdomains: subdomains.as_ref().map(|s| s.status()),
    };
    let mut intra_subjects = component_ids;
    intra_subjects.extend(spec.users.iter().map(|u| u.subject_id.clone()));
    Ok(DomainHandle {
        domain_id: d.into(),
        secured,
        endpoints,
        providers,
        id_broker,
        out_fed_broker,
        in_fed_broker,
        registrar,
        intra_discovery,
        fed_discovery: fed.discovery.clone(),
        intra_authority,
        fed_authority: fed.authority.clone(),
        peps,
        subdomains,
        intra_subjects,
        user_secrets: spec
            .users
            .iter()
            .map(|u| (u.subject_id.clone(), u.secret.clone()))
            .collect(),
        _services: services,
        _tasks: tasks,
        _own_federation: adopted.map(Box::new),
    })
}
