use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cm::AnnounceMode;
use crate::registrar::{PrivacyDirective, RegionEntry};
use crate::security::{Identity, Policy};

/// Which security scope protects a component's inbound side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecurityScope {
    Domain,
    Federation,
}

/// A discovery a component talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscoveryTarget {
    #[serde(rename = "idD")]
    IntraDiscovery,
    #[serde(rename = "fedD")]
    FederationDiscovery,
    #[serde(rename = "none")]
    Nowhere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundarySecurity {
    pub query_subscribe: SecurityScope,
    pub notify: SecurityScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SecurityRow {
    pub id_broker: SecurityScope,
    pub intra_discovery: SecurityScope,
    pub registrar: SecurityScope,
    pub fed_discovery: SecurityScope,
    pub out_fed_broker: BoundarySecurity,
    pub in_fed_broker: BoundarySecurity,
}

impl Default for SecurityRow {
    fn default() -> Self {
        Self {
            id_broker: SecurityScope::Domain,
            intra_discovery: SecurityScope::Domain,
            registrar: SecurityScope::Domain,
            fed_discovery: SecurityScope::Domain,
            out_fed_broker: BoundarySecurity {
                query_subscribe: SecurityScope::Domain,
                notify: SecurityScope::Federation,
            },
            in_fed_broker: BoundarySecurity {
                query_subscribe: SecurityScope::Federation,
                notify: SecurityScope::Domain,
            },
        }
    }
}

/// Where each boundary broker is registered as a provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegistrationRow {
    pub out_fed_broker: DiscoveryTarget,
    pub in_fed_broker: DiscoveryTarget,
}

impl Default for RegistrationRow {
    fn default() -> Self {
        Self {
            out_fed_broker: DiscoveryTarget::IntraDiscovery,
            in_fed_broker: DiscoveryTarget::FederationDiscovery,
        }
    }
}

/// Who follows provider availability in which discovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubscriptionRow {
    pub registrar: DiscoveryTarget,
}

impl Default for SubscriptionRow {
    fn default() -> Self {
        Self {
            registrar: DiscoveryTarget::IntraDiscovery,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DiscoveryRow {
    pub id_broker: DiscoveryTarget,
    pub out_fed_broker: DiscoveryTarget,
    pub in_fed_broker: DiscoveryTarget,
}

impl Default for DiscoveryRow {
    fn default() -> Self {
        Self {
            id_broker: DiscoveryTarget::IntraDiscovery,
            out_fed_broker: DiscoveryTarget::FederationDiscovery,
            in_fed_broker: DiscoveryTarget::IntraDiscovery,
        }
    }
}

/// Component placement. Assembly only accepts the reference settings;
/// the fields exist so a document states them explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Wiring {
    #[serde(default)]
    pub security: SecurityRow,
    #[serde(default)]
    pub registration: RegistrationRow,
    #[serde(default)]
    pub subscription: SubscriptionRow,
    #[serde(default)]
    pub discovery: DiscoveryRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProviderSpec {
    pub name: String,
    #[serde(default)]
    pub announce_mode: AnnounceMode,
    #[serde(default = "default_announce_ttl")]
    pub announce_ttl: u64,
    #[serde(default)]
    pub service_delay_ms: u64,
    #[serde(default)]
    pub service_concurrency: usize,
    #[serde(default)]
    pub snapshot_path: Option<PathBuf>,
}

fn default_announce_ttl() -> u64 {
    3600
}

impl ProviderSpec {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            announce_mode: AnnounceMode::default(),
            announce_ttl: default_announce_ttl(),
            service_delay_ms: 0,
            service_concurrency: 0,
            snapshot_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DomainSpec {
    pub domain_id: String,
    #[serde(default)]
    pub providers: Vec<ProviderSpec>,
    #[serde(default = "yes")]
    pub secured: bool,
    /// Application identities of the domain's own scope.
    #[serde(default)]
    pub users: Vec<Identity>,
    /// Rules of the domain's own scope, evaluated after the built-in rule
    /// permitting the domain's components. Empty permits everyone.
    #[serde(default)]
    pub policies: Vec<Policy>,
    /// Empty uses a type and 0.1 degree grid grouping for every type.
    #[serde(default)]
    pub directives: Vec<PrivacyDirective>,
    #[serde(default)]
    pub region_table: Vec<RegionEntry>,
    #[serde(default = "default_registration_ttl")]
    pub registration_ttl: u64,
    #[serde(default = "default_fanout_timeout")]
    pub fanout_timeout_ms: u64,
    #[serde(default = "default_tick")]
    pub registrar_tick_ms: u64,
    #[serde(default)]
    pub wiring: Wiring,
    /// Members of this domain when it is a super-domain.
    #[serde(default)]
    pub subdomains: Option<FederationSpec>,
}

fn yes() -> bool {
    true
}

fn default_registration_ttl() -> u64 {
    300
}

fn default_fanout_timeout() -> u64 {
    5000
}

fn default_tick() -> u64 {
    200
}

impl DomainSpec {
    pub fn new(domain_id: &str) -> Self {
        Self {
            domain_id: domain_id.into(),
            providers: Vec::new(),
            secured: true,
            users: Vec::new(),
            policies: Vec::new(),
            directives: Vec::new(),
            region_table: Vec::new(),
            registration_ttl: default_registration_ttl(),
            fanout_timeout_ms: default_fanout_timeout(),
            registrar_tick_ms: default_tick(),
            wiring: Wiring::default(),
            subdomains: None,
        }
    }

    pub fn with_providers(mut self, names: &[&str]) -> Self {
        self.providers = names.iter().map(|n| ProviderSpec::named(n)).collect();
        self
    }

    pub fn unsecured(mut self) -> Self {
        self.secured = false;
        self
    }

    pub fn is_super_domain(&self) -> bool {
        self.subdomains.is_some()
    }

    /// Check this domain (and any members) against the reference wiring.
    pub fn validate(&self) -> Result<(), SpecViolation> {
        let mut out = Vec::new();
        self.collect_violations(&mut out);
        SpecViolation::from_list(out)
    }

    fn collect_violations(&self, out: &mut Vec<String>) {
        let d = &self.domain_id;
        if d.is_empty() {
            out.push("domainId must not be empty".into());
        }
        if d.contains(':') {
            out.push(format!("domain {d}: domainId must not contain ':'"));
        }
        wiring_violations(d, &self.wiring, out);
        let mut names = BTreeSet::new();
        for p in &self.providers {
            if p.name.is_empty() || !names.insert(p.name.as_str()) {
                out.push(format!("domain {d}: provider names must be unique and non-empty"));
            }
        }
        for (i, directive) in self.directives.iter().enumerate() {
            if let Err(e) = directive.validate() {
                out.push(format!("domain {d}: directive {i}: {e}"));
            }
        }
        if let Some(inner) = &self.subdomains {
            inner.collect_violations(out);
            if inner.members.iter().any(|m| m.secured != self.secured) {
                out.push(format!(
                    "domain {d}: a super-domain and its members must agree on being secured"
                ));
            }
        }
    }
}

fn wiring_violations(d: &str, w: &Wiring, out: &mut Vec<String>) {
    use DiscoveryTarget::*;
    use SecurityScope::*;
    let s = &w.security;
    for (name, scope) in [
        ("idB", s.id_broker),
        ("idD", s.intra_discovery),
        ("IoTR", s.registrar),
        ("fedD", s.fed_discovery),
    ] {
        if scope != Domain {
            out.push(format!("domain {d}: Security row: {name} must be protected by the domain scope"));
        }
    }
    if s.out_fed_broker.query_subscribe != Domain || s.out_fed_broker.notify != Federation {
        out.push(format!(
            "domain {d}: Security row: outFedB must use the domain scope for query and subscribe and the federation scope for notify"
        ));
    }
    if s.in_fed_broker.query_subscribe != Federation || s.in_fed_broker.notify != Domain {
        out.push(format!(
            "domain {d}: Security row: inFedB must use the federation scope for query and subscribe and the domain scope for notify"
        ));
    }
    if w.registration.out_fed_broker != IntraDiscovery {
        out.push(format!("domain {d}: Registration row: outFedB must be registered as provider for everything in idD"));
    }
    if w.registration.in_fed_broker != FederationDiscovery {
        out.push(format!("domain {d}: Registration row: inFedB must be the provider of all registrations in fedD"));
    }
    if w.subscription.registrar != IntraDiscovery {
        out.push(format!("domain {d}: Subscription row: IoTR must subscribe to provider availability in idD"));
    }
    if w.discovery.id_broker != IntraDiscovery {
        out.push(format!("domain {d}: Discovery row: idB must discover through idD"));
    }
    if w.discovery.out_fed_broker != FederationDiscovery {
        out.push(format!("domain {d}: Discovery row: outFedB must discover through fedD"));
    }
    if w.discovery.in_fed_broker != IntraDiscovery {
        out.push(format!("domain {d}: Discovery row: inFedB must discover through idD"));
    }
}

/// Domains sharing one federation discovery and one federation authority,
/// each hosting a replica of both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FederationSpec {
    #[serde(default = "default_federation_id")]
    pub federation_id: String,
    pub members: Vec<DomainSpec>,
    /// Rules of the federation scope. Empty permits every member.
    #[serde(default)]
    pub policies: Vec<Policy>,
}

fn default_federation_id() -> String {
    "federation".into()
}

impl FederationSpec {
    pub fn new(federation_id: &str, members: Vec<DomainSpec>) -> Self {
        Self {
            federation_id: federation_id.into(),
            members,
            policies: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SpecViolation> {
        let mut out = Vec::new();
        self.collect_violations(&mut out);
        let mut ids = Vec::new();
        self.domain_ids(&mut ids);
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id) {
                out.push(format!("domain id {id} is used more than once"));
            }
        }
        SpecViolation::from_list(out)
    }

    fn collect_violations(&self, out: &mut Vec<String>) {
        if self.members.is_empty() {
            out.push(format!("federation {}: needs at least one member", self.federation_id));
        }
        if let Some(first) = self.members.first() {
            if self.members.iter().any(|m| m.secured != first.secured) {
                out.push(format!(
                    "federation {}: members must agree on being secured",
                    self.federation_id
                ));
            }
        }
        for m in &self.members {
            m.collect_violations(out);
        }
    }

    fn domain_ids<'a>(&'a self, out: &mut Vec<&'a str>) {
        for m in &self.members {
            out.push(&m.domain_id);
            if let Some(inner) = &m.subdomains {
                inner.domain_ids(out);
            }
        }
    }
}

/// Every constraint a document breaks.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid domain specification: {}", .violations.join("; "))]
pub struct SpecViolation {
    pub violations: Vec<String>,
}

impl SpecViolation {
    fn from_list(violations: Vec<String>) -> Result<(), Self> {
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Self { violations })
        }
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}
