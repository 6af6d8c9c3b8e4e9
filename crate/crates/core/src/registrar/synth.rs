use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{glob_match, EntityRef, GeoPoint, GridCell, Registration, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum KeyField {
    EntityType,
    GridCell,
    NamedRegion,
    /// Per-entity identity; required before concrete ids may be exposed.
    EntityId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LocationGranularity {
    Exact,
    #[serde(rename_all = "camelCase")]
    Grid { cell_size_degrees: f64 },
    /// Named region from the registrar's region table.
    Region,
    Suppress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExposeAttributes {
    All,
    Listed { names: Vec<String> },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PrivacyDirective {
    pub match_types: Vec<String>,
    #[serde(default = "default_key_fields")]
    pub key_fields: Vec<KeyField>,
    pub location_granularity: LocationGranularity,
    #[serde(default = "default_expose")]
    pub expose_attributes: ExposeAttributes,
    #[serde(default)]
    pub expose_entity_ids: bool,
}

fn default_key_fields() -> Vec<KeyField> {
    vec![KeyField::EntityType]
}

fn default_expose() -> ExposeAttributes {
    ExposeAttributes::All
}

impl PrivacyDirective {
    /// Group by type and grid cell, exposing no entity ids.
    pub fn by_type_and_grid(match_type: &str, cell_size_degrees: f64) -> Self {
        Self {
            match_types: vec![match_type.into()],
            key_fields: vec![KeyField::EntityType, KeyField::GridCell],
            location_granularity: LocationGranularity::Grid { cell_size_degrees },
            expose_attributes: ExposeAttributes::All,
            expose_entity_ids: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let LocationGranularity::Grid { cell_size_degrees } = self.location_granularity {
            if cell_size_degrees.is_nan() || cell_size_degrees <= 0.0 {
                return Err("grid cell size must be positive".into());
            }
        }
        if self.expose_entity_ids && !self.key_fields.contains(&KeyField::EntityId) {
            return Err("entity ids can only be exposed when grouping by entity id".into());
        }
        Ok(())
    }

    fn covers(&self, entity_type: &str) -> bool {
        self.match_types.iter().any(|p| glob_match(p, entity_type))
    }
}

/// Bounding box mapped to a region name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegionEntry {
    pub name: String,
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl RegionEntry {
    fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat) && (self.min_lon..=self.max_lon).contains(&p.lon)
    }
}

/// First entry whose box contains the point.
pub fn region_of(table: &[RegionEntry], p: GeoPoint) -> Option<&str> {
    table.iter().find(|r| r.contains(p)).map(|r| r.name.as_str())
}

fn point_of(scope: &Scope) -> Option<GeoPoint> {
    match scope {
        Scope::ExactPoint(p) => Some(*p),
        Scope::GridCell(c) => Some(c.center()),
        _ => None,
    }
}

/// Scope as published under a directive's granularity.
pub fn coarsen(scope: &Scope, granularity: &LocationGranularity, regions: &[RegionEntry]) -> Scope {
    match granularity {
        LocationGranularity::Exact => scope.clone(),
        LocationGranularity::Suppress => Scope::None,
        LocationGranularity::Grid { cell_size_degrees } => match point_of(scope) {
            Some(p) => Scope::GridCell(GridCell::containing(p, *cell_size_degrees)),
            None => Scope::None,
        },
        LocationGranularity::Region => match scope {
            Scope::NamedRegion(name) => Scope::NamedRegion(name.clone()),
            other => point_of(other)
                .and_then(|p| region_of(regions, p))
                .map_or(Scope::None, |name| Scope::NamedRegion(name.to_owned())),
        },
    }
}

/// What one synthesized registration exposes; identity and version are
/// assigned when it is pushed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Synthesized {
    pub entities: Vec<EntityRef>,
    pub attribute_names: Vec<String>,
    pub scope: Scope,
}

#[derive(Default)]
struct Group {
    types: BTreeSet<String>,
    ids: BTreeSet<(String, String)>,
    all_attributes: bool,
    attributes: BTreeSet<String>,
    scopes: Vec<Scope>,
}

fn key_part(field: KeyField, entity: &EntityRef, scope: &Scope) -> String {
    match field {
        KeyField::EntityType => format!("type={}", entity.entity_type),
        KeyField::EntityId => format!("id={}", entity.id),
        KeyField::GridCell => match scope {
            Scope::GridCell(c) => format!("cell={},{}@{}", c.lat_index, c.lon_index, c.cell_size),
            _ => "cell=-".into(),
        },
        KeyField::NamedRegion => match scope {
            Scope::NamedRegion(n) => format!("region={n}"),
            _ => "region=-".into(),
        },
    }
}

/// Pure synthesis of the registrations a domain exposes to the federation.
/// Each entity of each source registration is governed by the first
/// directive covering its type; entities no directive covers are not
/// exposed. The result is keyed by synthesis key and does not depend on
/// the order of `sources`.
pub fn synthesize(
    sources: &[Registration],
    directives: &[PrivacyDirective],
    regions: &[RegionEntry],
) -> BTreeMap<String, Synthesized> {
    let mut groups: BTreeMap<String, (usize, Group)> = BTreeMap::new();
    for reg in sources.iter().filter(|r| !r.is_tombstone()) {
        for entity in &reg.entities {
            let Some((index, directive)) =
                directives.iter().enumerate().find(|(_, d)| d.covers(&entity.entity_type))
            else {
                continue;
            };
            if directive.expose_attributes == ExposeAttributes::None {
                continue;
            }
            let scope = coarsen(&reg.scope, &directive.location_granularity, regions);
            let mut fields = directive.key_fields.clone();
            fields.sort();
            fields.dedup();
            let key = std::iter::once(format!("d{index}"))
                .chain(fields.iter().map(|f| key_part(*f, entity, &scope)))
                .collect::<Vec<_>>()
                .join("|");
            let (_, group) = groups.entry(key).or_insert_with(|| (index, Group::default()));
            group.types.insert(entity.entity_type.clone());
            group.ids.insert((entity.entity_type.clone(), entity.id.clone()));
            if reg.attribute_names.is_empty() {
                group.all_attributes = true;
            }
            group.attributes.extend(reg.attribute_names.iter().cloned());
            group.scopes.push(scope);
        }
    }
    let mut out = BTreeMap::new();
    for (key, (index, group)) in groups {
        let directive = &directives[index];
        let attribute_names: Vec<String> = match &directive.expose_attributes {
            ExposeAttributes::All if group.all_attributes => Vec::new(),
            ExposeAttributes::All => group.attributes.into_iter().collect(),
            ExposeAttributes::Listed { names } => {
                let mut listed: Vec<String> = names
                    .iter()
                    .filter(|n| group.all_attributes || group.attributes.contains(*n))
                    .cloned()
                    .collect();
                listed.sort();
                listed.dedup();
                if listed.is_empty() {
                    continue;
                }
                listed
            }
            ExposeAttributes::None => continue,
        };
        let first = group.scopes[0].clone();
        let scope = if group.scopes.iter().all(|s| *s == first) {
            first
        } else {
            Scope::None
        };
        let entities = if directive.expose_entity_ids && directive.key_fields.contains(&KeyField::EntityId) {
            group
                .ids
                .into_iter()
                .map(|(entity_type, id)| EntityRef::new(id, entity_type))
                .collect()
        } else {
            group.types.into_iter().map(|t| EntityRef::pattern("*", t)).collect()
        };
        out.insert(
            key,
            Synthesized {
                entities,
                attribute_names,
                scope,
            },
        );
    }
    out
}

/// Last registration pushed for a synthesis key, tombstones included so
/// that a key coming back continues its version sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Pushed {
    pub registration: Registration,
    pub pushed_at_ms: i64,
}

pub fn synthesized_id(endpoint: &str, key: &str) -> String {
    uuid::Uuid::new_v5(&uuid::Uuid::NAMESPACE_URL, format!("{endpoint}#{key}").as_bytes()).to_string()
}

/// Registrations to push so the federation discovery matches `new`:
/// new keys are registered, changed ones re-registered with the next
/// version, vanished ones tombstoned (ttl 0).
pub fn reconcile(
    old: &BTreeMap<String, Pushed>,
    new: &BTreeMap<String, Synthesized>,
    endpoint: &str,
    ttl: u64,
) -> Vec<(String, Registration)> {
    let mut actions = Vec::new();
    for (key, content) in new {
        let candidate = Registration {
            registration_id: synthesized_id(endpoint, key),
            version: 1,
            providing_endpoint: endpoint.to_owned(),
            entities: content.entities.clone(),
            attribute_names: content.attribute_names.clone(),
            scope: content.scope.clone(),
            ttl,
        };
        match old.get(key) {
            Some(p) if !p.registration.is_tombstone() && p.registration.same_content(&candidate) => {}
            Some(p) => actions.push((
                key.clone(),
                Registration {
                    version: p.registration.version + 1,
                    ..candidate
                },
            )),
            None => actions.push((key.clone(), candidate)),
        }
    }
    for (key, p) in old {
        if !new.contains_key(key) && !p.registration.is_tombstone() {
            actions.push((
                key.clone(),
                Registration {
                    version: p.registration.version + 1,
                    ttl: 0,
                    ..p.registration.clone()
                },
            ));
        }
    }
    actions
}

/// Live registrations due for re-registration: pushed at least ttl/2 ago.
pub fn refresh_due(pushed: &BTreeMap<String, Pushed>, now_ms: i64) -> Vec<(String, Registration)> {
    pushed
        .iter()
        .filter(|(_, p)| {
            !p.registration.is_tombstone() && now_ms - p.pushed_at_ms >= p.registration.ttl as i64 * 500
        })
        .map(|(key, p)| {
            (
                key.clone(),
                Registration {
                    version: p.registration.version + 1,
                    ..p.registration.clone()
                },
            )
        })
        .collect()
}
