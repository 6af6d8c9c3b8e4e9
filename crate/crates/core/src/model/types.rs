use serde::{Deserialize, Serialize};

/// Reference to an entity, or a glob over entity ids when `is_pattern` is set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EntityRef {
    pub id: String,
    #[serde(rename = "type")]
    pub entity_type: String,
    #[serde(default)]
    pub is_pattern: bool,
}

impl EntityRef {
    pub fn new(id: impl Into<String>, entity_type: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            entity_type: entity_type.into(),
            is_pattern: false,
        }
    }

    pub fn pattern(id: impl Into<String>, entity_type: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            entity_type: entity_type.into(),
            is_pattern: true,
        }
    }

    /// Matches every entity of every type.
    pub fn any() -> Self {
        Self::pattern("*", "*")
    }

    /// True when this reference can stand for more than one entity.
    pub fn is_wildcard(&self) -> bool {
        self.entity_type == "*" || (self.is_pattern && self.id.contains('*'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueType {
    Number,
    Text,
    GeoPoint,
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "valueType", content = "value", rename_all = "kebab-case")]
pub enum AttributeValue {
    Number(f64),
    Text(String),
    GeoPoint(GeoPoint),
    Structured(serde_json::Value),
}

impl AttributeValue {
    pub fn value_type(&self) -> ValueType {
        match self {
            AttributeValue::Number(_) => ValueType::Number,
            AttributeValue::Text(_) => ValueType::Text,
            AttributeValue::GeoPoint(_) => ValueType::GeoPoint,
            AttributeValue::Structured(_) => ValueType::Structured,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            AttributeValue::Number(n) => Some(*n),
            _ => None,
        }
    }

    fn is_valid(&self) -> bool {
        match self {
            AttributeValue::Number(n) => n.is_finite(),
            AttributeValue::GeoPoint(p) => p.is_valid(),
            AttributeValue::Text(_) | AttributeValue::Structured(_) => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Attribute {
    pub name: String,
    #[serde(flatten)]
    pub value: AttributeValue,
    /// Epoch milliseconds; zero means "stamp on arrival".
    #[serde(default)]
    pub timestamp: i64,
}

impl Attribute {
    pub fn number(name: impl Into<String>, value: f64, timestamp: i64) -> Self {
        Self {
            name: name.into(),
            value: AttributeValue::Number(value),
            timestamp,
        }
    }

    pub fn text(name: impl Into<String>, value: impl Into<String>, timestamp: i64) -> Self {
        Self {
            name: name.into(),
            value: AttributeValue::Text(value.into()),
            timestamp,
        }
    }

    pub fn geo(name: impl Into<String>, point: GeoPoint, timestamp: i64) -> Self {
        Self {
            name: name.into(),
            value: AttributeValue::GeoPoint(point),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContextElement {
    pub entity: EntityRef,
    #[serde(default)]
    pub attributes: Vec<Attribute>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_hint: Option<String>,
}

impl ContextElement {
    pub fn new(entity: EntityRef, attributes: Vec<Attribute>) -> Self {
        Self {
            entity,
            attributes,
            provider_hint: None,
        }
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    /// Sort key shared by every component that emits element lists.
    pub fn key(&self) -> (&str, &str) {
        (&self.entity.id, &self.entity.entity_type)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.entity.id.is_empty() {
            return Err("entity id is empty".into());
        }
        if self.entity.entity_type.is_empty() {
            return Err("entity type is empty".into());
        }
        if self.entity.is_pattern {
            return Err(format!("element {} is a pattern", self.entity.id));
        }
        let mut seen = std::collections::HashSet::new();
        for attr in &self.attributes {
            if attr.name.is_empty() {
                return Err(format!("element {} has an unnamed attribute", self.entity.id));
            }
            if !seen.insert(attr.name.as_str()) {
                return Err(format!(
                    "element {} repeats attribute {}",
                    self.entity.id, attr.name
                ));
            }
            if !attr.value.is_valid() {
                return Err(format!(
                    "element {} attribute {} has an out-of-range value",
                    self.entity.id, attr.name
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridCell {
    pub lat_index: i64,
    pub lon_index: i64,
    /// Edge length in degrees.
    pub cell_size: f64,
}

impl GridCell {
    pub fn containing(point: GeoPoint, cell_size: f64) -> Self {
        Self {
            lat_index: (point.lat / cell_size).floor() as i64,
            lon_index: (point.lon / cell_size).floor() as i64,
            cell_size,
        }
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.lat_index as f64 + 0.5) * self.cell_size,
            lon: (self.lon_index as f64 + 0.5) * self.cell_size,
        }
    }

    /// Half-open bounds `(lat_lo, lat_hi, lon_lo, lon_hi)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.lat_index as f64 * self.cell_size,
            (self.lat_index + 1) as f64 * self.cell_size,
            self.lon_index as f64 * self.cell_size,
            (self.lon_index + 1) as f64 * self.cell_size,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Scope {
    ExactPoint(GeoPoint),
    GridCell(GridCell),
    NamedRegion(String),
    #[default]
    None,
}

impl Scope {
    pub fn is_none(&self) -> bool {
        matches!(self, Scope::None)
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Scope::ExactPoint(p) if !p.is_valid() => Err("scope point out of range".into()),
            Scope::GridCell(c) if !(c.cell_size > 0.0 && c.cell_size.is_finite()) => {
                Err("grid cell size must be positive".into())
            }
            Scope::NamedRegion(name) if name.is_empty() => Err("region name is empty".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Registration {
    #[serde(default)]
    pub registration_id: String,
    #[serde(default = "default_version")]
    pub version: u64,
    pub providing_endpoint: String,
    pub entities: Vec<EntityRef>,
    /// Empty means every attribute.
    #[serde(default)]
    pub attribute_names: Vec<String>,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default = "default_registration_ttl")]
    pub ttl: u64,
}

fn default_version() -> u64 {
    1
}

fn default_registration_ttl() -> u64 {
    300
}

impl Registration {
    /// A zero TTL marks a withdrawn registration.
    pub fn is_tombstone(&self) -> bool {
        self.ttl == 0
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version == 0 {
            return Err("registration version must be >= 1".into());
        }
        if !is_valid_endpoint(&self.providing_endpoint) {
            return Err(format!(
                "providing endpoint {:?} is not a valid URL",
                self.providing_endpoint
            ));
        }
        if self.entities.iter().any(|e| e.id.is_empty()) {
            return Err("registration entity id is empty".into());
        }
        self.scope.validate()
    }

    /// Equality on everything except identity and version.
    pub fn same_content(&self, other: &Registration) -> bool {
        self.providing_endpoint == other.providing_endpoint
            && self.entities == other.entities
            && self.attribute_names == other.attribute_names
            && self.scope == other.scope
            && self.ttl == other.ttl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateMode {
    #[default]
    Set,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub struct QueryRequest {
    pub entities: Vec<EntityRef>,
    #[serde(default)]
    pub attribute_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
    #[serde(default)]
    pub aggregate: AggregateMode,
}

impl QueryRequest {
    pub fn new(entities: Vec<EntityRef>, attribute_names: Vec<String>) -> Self {
        Self {
            entities,
            attribute_names,
            scope: None,
            aggregate: AggregateMode::Set,
        }
    }
}

/// Side-channel note attached to a response: a provider that failed, or
/// an attribute that an aggregation had to drop.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Annotation {
    pub source: String,
    pub code: u16,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub struct QueryResponse {
    #[serde(default)]
    pub context_elements: Vec<ContextElement>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotations: Vec<Annotation>,
}

impl QueryResponse {
    pub fn of(context_elements: Vec<ContextElement>) -> Self {
        Self {
            context_elements,
            annotations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubscriptionKind {
    Context,
    Availability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Subscription {
    /// Assigned by the receiving service when left empty.
    #[serde(default)]
    pub subscription_id: String,
    pub kind: SubscriptionKind,
    pub entities: Vec<EntityRef>,
    #[serde(default)]
    pub attribute_names: Vec<String>,
    pub callback_endpoint: String,
    #[serde(default = "default_subscription_ttl")]
    pub ttl: u64,
}

fn default_subscription_ttl() -> u64 {
    3600
}

impl Subscription {
    pub fn context(
        entities: Vec<EntityRef>,
        attribute_names: Vec<String>,
        callback_endpoint: impl Into<String>,
        ttl: u64,
    ) -> Self {
        Self {
            subscription_id: String::new(),
            kind: SubscriptionKind::Context,
            entities,
            attribute_names,
            callback_endpoint: callback_endpoint.into(),
            ttl,
        }
    }

    pub fn availability(
        entities: Vec<EntityRef>,
        attribute_names: Vec<String>,
        callback_endpoint: impl Into<String>,
        ttl: u64,
    ) -> Self {
        Self {
            kind: SubscriptionKind::Availability,
            ..Self::context(entities, attribute_names, callback_endpoint, ttl)
        }
    }

    /// The query a subscription stands for, used for registration matching.
    pub fn as_query(&self) -> QueryRequest {
        QueryRequest::new(self.entities.clone(), self.attribute_names.clone())
    }

    pub fn is_expired(&self, created_at_ms: i64, now_ms: i64) -> bool {
        now_ms - created_at_ms > self.ttl as i64 * 1000
    }
}

/// Syntactic check for service endpoints: absolute http(s) URL with a host.
pub fn is_valid_endpoint(endpoint: &str) -> bool {
    match url::Url::parse(endpoint) {
        Ok(u) => matches!(u.scheme(), "http" | "https") && u.host_str().is_some(),
        Err(_) => false,
    }
}

/// Canonical form used to deduplicate provider endpoints: lowercase host,
/// no trailing slash.
pub fn normalize_endpoint(endpoint: &str) -> String {
    match url::Url::parse(endpoint) {
        Ok(u) => {
            let mut out = format!("{}://{}", u.scheme(), u.host_str().unwrap_or_default());
            if let Some(port) = u.port() {
                out.push_str(&format!(":{port}"));
            }
            out.push_str(u.path().trim_end_matches('/'));
            out
        }
        Err(_) => endpoint.trim_end_matches('/').to_ascii_lowercase(),
    }
}
