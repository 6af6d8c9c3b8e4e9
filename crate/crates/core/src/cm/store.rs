use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::model::{
    filter_attributes, is_valid_endpoint, match_entity, Attribute, ContextElement, EntityRef,
    QueryRequest, Subscription, SubscriptionKind,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("malformed element: {0}")]
    MalformedElement(String),
    #[error("invalid subscription: {0}")]
    InvalidSubscription(String),
    #[error("invalid callback endpoint {0:?}")]
    InvalidCallback(String),
    #[error("unknown subscription {0}")]
    UnknownSubscription(String),
    #[error("subscription {0} already exists")]
    DuplicateSubscription(String),
}

#[derive(Debug, Clone)]
pub struct ActiveSubscription {
    pub subscription: Subscription,
    pub created_at_ms: i64,
}

/// A notification owed to one subscriber after a publish.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingNotification {
    pub subscription: Subscription,
    pub elements: Vec<ContextElement>,
}

#[derive(Debug, Clone, Default)]
pub struct PublishOutcome {
    pub notifications: Vec<PendingNotification>,
    /// The set of entities, attribute names or locations changed, so the
    /// provider's availability registrations may need updating.
    pub availability_changed: bool,
}

type Key = (String, String);

/// Attribute name that places an entity on the map.
pub const LOCATION_ATTRIBUTE: &str = "location";

/// In-memory context storage with at most one element per (id, type).
#[derive(Debug, Default)]
pub struct ContextStore {
    elements: BTreeMap<Key, BTreeMap<String, Attribute>>,
    subscriptions: HashMap<String, ActiveSubscription>,
}

impl ContextStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Upsert a batch attribute-wise. The whole batch is validated before
    /// anything is written.
    pub fn publish(
        &mut self,
        batch: &[ContextElement],
        now_ms: i64,
    ) -> Result<PublishOutcome, StoreError> {
        for element in batch {
            element.validate().map_err(StoreError::MalformedElement)?;
        }
        let mut availability_changed = false;
        // updated attribute names per element, in first-seen order
        let mut touched: Vec<(Key, BTreeSet<String>)> = Vec::new();
        for element in batch {
            let key = (element.entity.id.clone(), element.entity.entity_type.clone());
            let stored = match self.elements.get_mut(&key) {
                Some(stored) => stored,
                None => {
                    availability_changed = true;
                    self.elements.entry(key.clone()).or_default()
                }
            };
            let names = match touched.iter_mut().find(|(k, _)| *k == key) {
                Some((_, names)) => names,
                None => {
                    touched.push((key.clone(), BTreeSet::new()));
                    &mut touched.last_mut().expect("just pushed").1
                }
            };
            for attr in &element.attributes {
                let mut attr = attr.clone();
                if attr.timestamp == 0 {
                    attr.timestamp = now_ms;
                }
                if attr.name == LOCATION_ATTRIBUTE
                    && stored.get(&attr.name).map(|a| &a.value) != Some(&attr.value)
                {
                    availability_changed = true;
                }
                names.insert(attr.name.clone());
                if stored.insert(attr.name.clone(), attr).is_none() {
                    availability_changed = true;
                }
            }
        }

        self.purge_expired(now_ms);
        let mut notifications = Vec::new();
        for active in self.subscriptions.values() {
            let sub = &active.subscription;
            let elements: Vec<ContextElement> = touched
                .iter()
                .filter_map(|(key, names)| {
                    let entity = EntityRef::new(key.0.clone(), key.1.clone());
                    if !sub.entities.iter().any(|p| match_entity(p, &entity)) {
                        return None;
                    }
                    let stored = &self.elements[key];
                    let updated = ContextElement::new(
                        entity,
                        names.iter().map(|n| stored[n].clone()).collect(),
                    );
                    let filtered = filter_attributes(&updated, &sub.attribute_names);
                    (!filtered.attributes.is_empty()).then_some(filtered)
                })
                .collect();
            if !elements.is_empty() {
                notifications.push(PendingNotification {
                    subscription: sub.clone(),
                    elements,
                });
            }
        }
        Ok(PublishOutcome {
            notifications,
            availability_changed,
        })
    }

    fn element(&self, key: &Key) -> ContextElement {
        ContextElement::new(
            EntityRef::new(key.0.clone(), key.1.clone()),
            self.elements[key].values().cloned().collect(),
        )
    }

    fn matching_keys<'a>(&'a self, patterns: &'a [EntityRef]) -> BTreeSet<&'a Key> {
        let mut hits = BTreeSet::new();
        for pattern in patterns {
            if !pattern.is_pattern && pattern.entity_type != "*" {
                let key = (pattern.id.clone(), pattern.entity_type.clone());
                if let Some((k, _)) = self.elements.get_key_value(&key) {
                    hits.insert(k);
                }
            } else if !pattern.is_pattern {
                // concrete id, any type: the id is the leading key component
                let start = (pattern.id.clone(), String::new());
                for (k, _) in self.elements.range(start..) {
                    if k.0 != pattern.id {
                        break;
                    }
                    hits.insert(k);
                }
            } else {
                for k in self.elements.keys() {
                    if match_entity(pattern, &EntityRef::new(k.0.clone(), k.1.clone())) {
                        hits.insert(k);
                    }
                }
            }
        }
        hits
    }

    /// Elements selected by the query, attributes narrowed to its list,
    /// ordered by (id, type).
    /// With a non-empty attribute list, entities holding none of the
    /// listed attributes are left out.
    pub fn query(&self, q: &QueryRequest) -> Vec<ContextElement> {
        self.matching_keys(&q.entities)
            .into_iter()
            .map(|key| self.element_filtered(key, &q.attribute_names))
            .filter(|e| q.attribute_names.is_empty() || !e.attributes.is_empty())
            .collect()
    }

    fn element_filtered(&self, key: &Key, allowed: &[String]) -> ContextElement {
        if allowed.is_empty() {
            return self.element(key);
        }
        let stored = &self.elements[key];
        let names: BTreeSet<&String> = allowed.iter().collect();
        ContextElement::new(
            EntityRef::new(key.0.clone(), key.1.clone()),
            names.into_iter().filter_map(|n| stored.get(n).cloned()).collect(),
        )
    }

    /// Entity, attribute names and location of every stored element.
    pub fn availability_items(&self) -> Vec<super::announce::AvailabilityItem> {
        self.elements
            .iter()
            .map(|((id, ty), attrs)| super::announce::AvailabilityItem {
                entity: EntityRef::new(id.clone(), ty.clone()),
                attribute_names: attrs.keys().cloned().collect(),
                location: match attrs.get(LOCATION_ATTRIBUTE).map(|a| &a.value) {
                    Some(crate::model::AttributeValue::GeoPoint(p)) => Some(*p),
                    _ => None,
                },
            })
            .collect()
    }

    /// Every stored element in key order.
    pub fn all_elements(&self) -> Vec<ContextElement> {
        self.elements.keys().map(|k| self.element(k)).collect()
    }

    /// Store a context subscription and return it (with its id) together
    /// with the currently matching elements for the initial notification.
    pub fn subscribe(
        &mut self,
        mut sub: Subscription,
        now_ms: i64,
    ) -> Result<(Subscription, Vec<ContextElement>), StoreError> {
        if sub.kind != SubscriptionKind::Context {
            return Err(StoreError::InvalidSubscription(
                "kind must be context".into(),
            ));
        }
        if !is_valid_endpoint(&sub.callback_endpoint) {
            return Err(StoreError::InvalidCallback(sub.callback_endpoint));
        }
        if sub.entities.is_empty() {
            return Err(StoreError::InvalidSubscription("no entities".into()));
        }
        self.purge_expired(now_ms);
        if sub.subscription_id.is_empty() {
            sub.subscription_id = uuid::Uuid::new_v4().to_string();
        } else if self.subscriptions.contains_key(&sub.subscription_id) {
            return Err(StoreError::DuplicateSubscription(sub.subscription_id));
        }
        let initial: Vec<ContextElement> = self
            .query(&sub.as_query())
            .into_iter()
            .filter(|e| !e.attributes.is_empty())
            .collect();
        self.subscriptions.insert(
            sub.subscription_id.clone(),
            ActiveSubscription {
                subscription: sub.clone(),
                created_at_ms: now_ms,
            },
        );
        Ok((sub, initial))
    }

    pub fn unsubscribe(&mut self, subscription_id: &str) -> Result<(), StoreError> {
        self.subscriptions
            .remove(subscription_id)
            .map(|_| ())
            .ok_or_else(|| StoreError::UnknownSubscription(subscription_id.to_owned()))
    }

    pub fn subscription_count(&self) -> usize {
        self.subscriptions.len()
    }

    fn purge_expired(&mut self, now_ms: i64) {
        self.subscriptions
            .retain(|_, a| !a.subscription.is_expired(a.created_at_ms, now_ms));
    }
}
