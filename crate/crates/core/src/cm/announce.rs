use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use super::store::LOCATION_ATTRIBUTE;
use crate::clock::SharedClock;
use crate::model::wire::{RegisterResponse, REGISTER_CONTEXT};
use crate::model::{AttributeValue, ContextElement, EntityRef, GeoPoint, Registration, Scope};
use crate::net::WireClient;

/// Granularity of the availability a provider announces about itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnounceMode {
    /// One registration per entity type, entity id left as `*`.
    TypeLevel,
    /// One registration per (type, location) listing concrete entity ids.
    #[default]
    EntityLevel,
}

/// What a provider needs to know about one stored element to announce it.
#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilityItem {
    pub entity: EntityRef,
    pub attribute_names: Vec<String>,
    pub location: Option<GeoPoint>,
}

impl AvailabilityItem {
    pub fn of(element: &ContextElement) -> Self {
        Self {
            entity: element.entity.clone(),
            attribute_names: element.attributes.iter().map(|a| a.name.clone()).collect(),
            location: match element.attribute(LOCATION_ATTRIBUTE).map(|a| &a.value) {
                Some(AttributeValue::GeoPoint(p)) => Some(*p),
                _ => None,
            },
        }
    }
}

/// Registrations describing what `elements` make available at `endpoint`.
/// Ids are derived from the grouping key, so they are stable across runs.
pub fn availability_registrations(
    items: &[AvailabilityItem],
    endpoint: &str,
    mode: AnnounceMode,
    ttl: u64,
) -> Vec<Registration> {
    struct Group {
        scope: Scope,
        ids: BTreeSet<String>,
        attrs: BTreeSet<String>,
    }
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    for item in items {
        let scope = match (mode, item.location) {
            (AnnounceMode::EntityLevel, Some(p)) => Scope::ExactPoint(p),
            _ => Scope::None,
        };
        let scope_key = serde_json::to_string(&scope).unwrap_or_default();
        let group = groups
            .entry((item.entity.entity_type.clone(), scope_key))
            .or_insert_with(|| Group {
                scope,
                ids: BTreeSet::new(),
                attrs: BTreeSet::new(),
            });
        group.ids.insert(item.entity.id.clone());
        group.attrs.extend(item.attribute_names.iter().cloned());
    }
    groups
        .into_iter()
        .map(|((entity_type, scope_key), group)| {
            let key = format!("{endpoint}|{entity_type}|{scope_key}");
            let entities = match mode {
                AnnounceMode::TypeLevel => vec![EntityRef::pattern("*", entity_type)],
                AnnounceMode::EntityLevel => group
                    .ids
                    .into_iter()
                    .map(|id| EntityRef::new(id, entity_type.clone()))
                    .collect(),
            };
            Registration {
                registration_id: uuid::Uuid::new_v5(&uuid::Uuid::NAMESPACE_URL, key.as_bytes())
                    .to_string(),
                version: 1,
                providing_endpoint: endpoint.to_owned(),
                entities,
                attribute_names: group.attrs.into_iter().collect(),
                scope: group.scope,
                ttl,
            }
        })
        .collect()
}

#[derive(Debug, Default)]
struct Announced {
    regs: BTreeMap<String, Registration>,
    sent_at_ms: i64,
}

/// Keeps a provider's registrations at its announcement targets in step
/// with the store, refreshing them before their TTL runs out.
#[derive(Debug)]
pub struct Announcer {
    pub targets: Vec<String>,
    pub endpoint: String,
    pub mode: AnnounceMode,
    pub ttl: u64,
    token: Option<String>,
    client: WireClient,
    clock: SharedClock,
    state: Mutex<Announced>,
}

impl Announcer {
    pub fn new(
        targets: Vec<String>,
        endpoint: String,
        mode: AnnounceMode,
        ttl: u64,
        token: Option<String>,
        client: WireClient,
        clock: SharedClock,
    ) -> Self {
        Self {
            targets,
            endpoint,
            mode,
            ttl,
            token,
            client,
            clock,
            state: Mutex::new(Announced::default()),
        }
    }

    pub fn refresh_interval_ms(&self) -> i64 {
        (self.ttl as i64 * 1000 / 2).max(1000)
    }

    /// Push changed registrations (and tombstones for vanished ones).
    /// With `force`, every live registration is re-sent. Returns false if
    /// any target rejected or could not be reached; unsent changes are
    /// retried on the next call.
    pub async fn sync(&self, items: &[AvailabilityItem], force: bool) -> bool {
        let mut state = self.state.lock().await;
        let now = self.clock.now_ms();
        let desired = availability_registrations(items, &self.endpoint, self.mode, self.ttl);
        let desired_ids: BTreeSet<String> =
            desired.iter().map(|r| r.registration_id.clone()).collect();

        let mut outgoing = Vec::new();
        for mut reg in desired {
            match state.regs.get(&reg.registration_id) {
                Some(prev) if prev.same_content(&reg) && !force => continue,
                Some(prev) => reg.version = next_version(prev.version, now),
                None => reg.version = next_version(0, now),
            }
            outgoing.push(reg);
        }
        for (id, prev) in &state.regs {
            if !desired_ids.contains(id) && !prev.is_tombstone() {
                let mut tomb = prev.clone();
                tomb.ttl = 0;
                tomb.version = next_version(prev.version, now);
                outgoing.push(tomb);
            }
        }

        let mut ok = true;
        for reg in outgoing {
            let mut delivered = true;
            for target in &self.targets {
                let sent = self
                    .client
                    .post::<_, RegisterResponse>(target, REGISTER_CONTEXT, &reg, self.token.as_deref())
                    .await;
                if let Err(e) = sent {
                    tracing::warn!(%target, registration = %reg.registration_id, error = %e, "announcement failed");
                    delivered = false;
                }
            }
            if delivered {
                state.regs.insert(reg.registration_id.clone(), reg);
            } else {
                ok = false;
            }
        }
        state.regs.retain(|_, r| !r.is_tombstone());
        if ok && (force || state.sent_at_ms == 0) {
            state.sent_at_ms = now;
        }
        ok
    }

    pub async fn refresh_due(&self) -> bool {
        let state = self.state.lock().await;
        !state.regs.is_empty() && self.clock.now_ms() - state.sent_at_ms >= self.refresh_interval_ms()
    }

    pub async fn announced(&self) -> Vec<Registration> {
        self.state.lock().await.regs.values().cloned().collect()
    }
}

/// Versions track wall-clock milliseconds so a restarted provider never
/// re-announces below what a registry already holds.
fn next_version(previous: u64, now_ms: i64) -> u64 {
    (previous + 1).max(now_ms.max(1) as u64)
}
