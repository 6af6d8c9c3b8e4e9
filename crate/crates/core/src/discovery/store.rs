use std::collections::{BTreeSet, HashMap};

use crate::model::{
    is_valid_endpoint, match_registration, QueryRequest, Registration, Subscription,
    SubscriptionKind,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("invalid registration: {0}")]
    InvalidRegistration(String),
    #[error("stale version {offered} for {registration_id} (stored {stored})")]
    StaleVersion {
        registration_id: String,
        stored: u64,
        offered: u64,
    },
    #[error("invalid subscription: {0}")]
    InvalidSubscription(String),
    #[error("invalid callback endpoint {0:?}")]
    InvalidCallback(String),
    #[error("unknown subscription {0}")]
    UnknownSubscription(String),
    #[error("subscription {0} already exists")]
    DuplicateSubscription(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoredRegistration {
    pub registration: Registration,
    pub registered_at_ms: i64,
    pub origin: String,
    pub op_id: String,
}

impl StoredRegistration {
    pub fn is_live(&self, now_ms: i64) -> bool {
        !self.registration.is_tombstone()
            && now_ms <= self.registered_at_ms + self.registration.ttl as i64 * 1000
    }

    fn precedence(&self) -> (u64, &str, &str) {
        (self.registration.version, &self.origin, &self.op_id)
    }
}

/// Result of a write: the stored registration and the availability
/// subscriptions that must hear about it.
#[derive(Debug, Clone)]
pub struct Accepted {
    pub stored: StoredRegistration,
    pub subscribers: Vec<Subscription>,
}

#[derive(Debug, Clone)]
struct ActiveAvailability {
    subscription: Subscription,
    created_at_ms: i64,
}

/// Registration registry with an index from concrete (type, id) pairs to
/// the registrations naming them; registrations with wildcard entities are
/// kept in a side list that every lookup scans.
#[derive(Debug, Default)]
pub struct RegistrationStore {
    regs: HashMap<String, StoredRegistration>,
    by_entity: HashMap<(String, String), BTreeSet<String>>,
    wildcard: BTreeSet<String>,
    subs: HashMap<String, ActiveAvailability>,
}

impl RegistrationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, registration_id: &str) -> Option<&StoredRegistration> {
        self.regs.get(registration_id)
    }

    pub fn len(&self) -> usize {
        self.regs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regs.is_empty()
    }

    fn unindex(&mut self, id: &str) {
        let Some(old) = self.regs.get(id) else { return };
        for e in &old.registration.entities {
            if e.is_wildcard() {
                continue;
            }
            let key = (e.entity_type.clone(), e.id.clone());
            if let Some(set) = self.by_entity.get_mut(&key) {
                set.remove(id);
                if set.is_empty() {
                    self.by_entity.remove(&key);
                }
            }
        }
        self.wildcard.remove(id);
    }

    fn index(&mut self, stored: &StoredRegistration) {
        let id = &stored.registration.registration_id;
        for e in &stored.registration.entities {
            if e.is_wildcard() {
                self.wildcard.insert(id.clone());
            } else {
                self.by_entity
                    .entry((e.entity_type.clone(), e.id.clone()))
                    .or_default()
                    .insert(id.clone());
            }
        }
    }

    fn put(&mut self, stored: StoredRegistration) {
        let id = stored.registration.registration_id.clone();
        self.unindex(&id);
        self.index(&stored);
        self.regs.insert(id, stored);
    }

    fn subscribers_for(&mut self, reg: &Registration, now_ms: i64) -> Vec<Subscription> {
        self.subs
            .retain(|_, a| !a.subscription.is_expired(a.created_at_ms, now_ms));
        self.subs
            .values()
            .filter(|a| match_registration(&a.subscription.as_query(), reg))
            .map(|a| a.subscription.clone())
            .collect()
    }

    /// Local write: accepted only if the version is newer than what is
    /// stored. Assigns an id when the registration carries none.
    pub fn register(
        &mut self,
        mut reg: Registration,
        now_ms: i64,
        origin: &str,
    ) -> Result<Accepted, RegistryError> {
        reg.validate().map_err(RegistryError::InvalidRegistration)?;
        if reg.registration_id.is_empty() {
            reg.registration_id = uuid::Uuid::new_v4().to_string();
        }
        if let Some(current) = self.regs.get(&reg.registration_id) {
            if current.registration.version >= reg.version {
                return Err(RegistryError::StaleVersion {
                    registration_id: reg.registration_id,
                    stored: current.registration.version,
                    offered: reg.version,
                });
            }
        }
        let stored = StoredRegistration {
            registration: reg,
            registered_at_ms: now_ms,
            origin: origin.to_owned(),
            op_id: uuid::Uuid::new_v4().to_string(),
        };
        let subscribers = self.subscribers_for(&stored.registration, now_ms);
        self.put(stored.clone());
        Ok(Accepted { stored, subscribers })
    }

    /// Replica write: last-writer-wins on (version, origin, op id).
    /// Returns `None` when the incoming write loses.
    pub fn apply_replicated(
        &mut self,
        incoming: StoredRegistration,
        now_ms: i64,
    ) -> Option<Accepted> {
        if let Some(current) = self.regs.get(&incoming.registration.registration_id) {
            if current.precedence() >= incoming.precedence() {
                return None;
            }
        }
        let subscribers = if incoming.is_live(now_ms) || incoming.registration.is_tombstone() {
            self.subscribers_for(&incoming.registration, now_ms)
        } else {
            Vec::new()
        };
        self.put(incoming.clone());
        Some(Accepted {
            stored: incoming,
            subscribers,
        })
    }

    fn candidates(&self, q: &QueryRequest) -> BTreeSet<&String> {
        let mut out: BTreeSet<&String> = BTreeSet::new();
        for e in &q.entities {
            if e.is_wildcard() {
                return self.regs.keys().collect();
            }
            if let Some(ids) = self.by_entity.get(&(e.entity_type.clone(), e.id.clone())) {
                out.extend(ids.iter());
            }
        }
        out.extend(self.wildcard.iter());
        out
    }

    /// Live registrations matching the query, ordered by registration id.
    pub fn discover(&self, q: &QueryRequest, now_ms: i64) -> Vec<Registration> {
        self.candidates(q)
            .into_iter()
            .filter_map(|id| self.regs.get(id))
            .filter(|s| s.is_live(now_ms) && match_registration(q, &s.registration))
            .map(|s| s.registration.clone())
            .collect()
    }

    /// Every live registration, ordered by id.
    pub fn live(&self, now_ms: i64) -> Vec<Registration> {
        let mut out: Vec<Registration> = self
            .regs
            .values()
            .filter(|s| s.is_live(now_ms))
            .map(|s| s.registration.clone())
            .collect();
        out.sort_by(|a, b| a.registration_id.cmp(&b.registration_id));
        out
    }

    pub fn subscribe(
        &mut self,
        mut sub: Subscription,
        now_ms: i64,
    ) -> Result<(Subscription, Vec<Registration>), RegistryError> {
        if sub.kind != SubscriptionKind::Availability {
            return Err(RegistryError::InvalidSubscription(
                "kind must be availability".into(),
            ));
        }
        if !is_valid_endpoint(&sub.callback_endpoint) {
            return Err(RegistryError::InvalidCallback(sub.callback_endpoint));
        }
        if sub.subscription_id.is_empty() {
            sub.subscription_id = uuid::Uuid::new_v4().to_string();
        } else if self.subs.contains_key(&sub.subscription_id) {
            return Err(RegistryError::DuplicateSubscription(sub.subscription_id));
        }
        let current = self.discover(&sub.as_query(), now_ms);
        self.subs.insert(
            sub.subscription_id.clone(),
            ActiveAvailability {
                subscription: sub.clone(),
                created_at_ms: now_ms,
            },
        );
        Ok((sub, current))
    }

    pub fn unsubscribe(&mut self, subscription_id: &str) -> Result<(), RegistryError> {
        self.subs
            .remove(subscription_id)
            .map(|_| ())
            .ok_or_else(|| RegistryError::UnknownSubscription(subscription_id.to_owned()))
    }

    /// Drop expired registrations. Tombstones stay so older versions cannot
    /// resurrect a withdrawn registration.
    pub fn sweep(&mut self, now_ms: i64) -> usize {
        let expired: Vec<String> = self
            .regs
            .values()
            .filter(|s| !s.registration.is_tombstone() && !s.is_live(now_ms))
            .map(|s| s.registration.registration_id.clone())
            .collect();
        for id in &expired {
            self.unindex(id);
            self.regs.remove(id);
        }
        expired.len()
    }

    /// Shortest TTL among live registrations, if any.
    pub fn min_ttl(&self) -> Option<u64> {
        self.regs
            .values()
            .filter(|s| !s.registration.is_tombstone())
            .map(|s| s.registration.ttl)
            .min()
    }
}
