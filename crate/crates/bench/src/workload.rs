use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 0x5eed_1075;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Topology {
    /// One CM holding everything, queried directly.
    Centralized,
    /// Data in one domain, queries entering another, no enforcement.
    FederatedUnsecured,
    FederatedSecured,
    /// One domain with `providers` CMs holding disjoint partitions,
    /// queried through its intra-domain broker.
    #[serde(rename_all = "camelCase")]
    MultiProvider {
        providers: usize,
        entities_each: usize,
        #[serde(default)]
        secured: bool,
    },
}

impl Topology {
    pub fn label(&self) -> String {
        match self {
            Topology::Centralized => "centralized".into(),
            Topology::FederatedUnsecured => "federated-unsecured".into(),
            Topology::FederatedSecured => "federated-secured".into(),
            Topology::MultiProvider {
                providers,
                entities_each,
                secured,
            } => format!(
                "multi-provider-{providers}x{entities_each}{}",
                if *secured { "-secured" } else { "" }
            ),
        }
    }

    /// Entity count this topology holds, when it fixes one.
    pub fn fixed_entities(&self) -> Option<usize> {
        match self {
            Topology::MultiProvider {
                providers,
                entities_each,
                ..
            } => Some(providers * entities_each),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EntitiesPerQuery {
    /// Uniform over [1, max].
    Uniform { max: usize },
    Fixed { count: usize },
}

impl EntitiesPerQuery {
    pub fn max(&self) -> usize {
        match *self {
            EntitiesPerQuery::Uniform { max } => max,
            EntitiesPerQuery::Fixed { count } => count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkloadSpec {
    pub total_entities: usize,
    #[serde(default = "default_attributes_per_entity")]
    pub attributes_per_entity: usize,
    #[serde(default = "default_attributes_per_query")]
    pub attributes_per_query: usize,
    /// Defaults to uniform over [1, min(100, totalEntities)].
    #[serde(default)]
    pub entities_per_query: Option<EntitiesPerQuery>,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_duration")]
    pub duration_seconds: f64,
    #[serde(default = "default_warmup")]
    pub warmup_seconds: f64,
    /// Stop each client after this many measured requests instead of
    /// after the duration.
    #[serde(default)]
    pub requests_per_client: Option<u64>,
    pub topology: Topology,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Artificial service time at every CM.
    #[serde(default)]
    pub cm_service_delay_ms: u64,
    /// Queries a CM serves at once; 0 means unbounded.
    #[serde(default)]
    pub cm_service_concurrency: usize,
    /// Fraction of responses compared value by value with the seed data.
    #[serde(default = "default_check_fraction")]
    pub check_fraction: f64,
}

fn default_attributes_per_entity() -> usize {
    100
}

fn default_attributes_per_query() -> usize {
    20
}

fn default_clients() -> usize {
    20
}

fn default_duration() -> f64 {
    60.0
}

fn default_warmup() -> f64 {
    10.0
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_check_fraction() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkloadError {
    #[error("attributesPerQuery ({per_query}) exceeds attributesPerEntity ({per_entity})")]
    TooManyAttributes { per_query: usize, per_entity: usize },
    #[error("entities per query must be in [1, {total}], got {got}")]
    BadEntitiesPerQuery { got: usize, total: usize },
    #[error("totalEntities ({total}) does not match the topology's {fixed}")]
    EntityCountMismatch { total: usize, fixed: usize },
    #[error("{0}")]
    Invalid(String),
}

impl WorkloadSpec {
    pub fn new(topology: Topology, total_entities: usize) -> Self {
        Self {
            total_entities,
            attributes_per_entity: default_attributes_per_entity(),
            attributes_per_query: default_attributes_per_query(),
            entities_per_query: None,
            clients: default_clients(),
            duration_seconds: default_duration(),
            warmup_seconds: default_warmup(),
            requests_per_client: None,
            topology,
            seed: DEFAULT_SEED,
            cm_service_delay_ms: 0,
            cm_service_concurrency: 0,
            check_fraction: default_check_fraction(),
        }
    }

    pub fn entities_per_query(&self) -> EntitiesPerQuery {
        self.entities_per_query.unwrap_or(EntitiesPerQuery::Uniform {
            max: self.total_entities.min(100),
        })
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.attributes_per_query > self.attributes_per_entity {
            return Err(WorkloadError::TooManyAttributes {
                per_query: self.attributes_per_query,
                per_entity: self.attributes_per_entity,
            });
        }
        let n = self.entities_per_query().max();
        if n == 0 || n > self.total_entities {
            return Err(WorkloadError::BadEntitiesPerQuery {
                got: n,
                total: self.total_entities,
            });
        }
        if let Some(fixed) = self.topology.fixed_entities() {
            if fixed != self.total_entities {
                return Err(WorkloadError::EntityCountMismatch {
                    total: self.total_entities,
                    fixed,
                });
            }
        }
        if self.clients == 0 {
            return Err(WorkloadError::Invalid("at least one client is needed".into()));
        }
        if !(0.0..=1.0).contains(&self.check_fraction) {
            return Err(WorkloadError::Invalid("checkFraction must be within [0, 1]".into()));
        }
        if self.requests_per_client.is_none() && (self.duration_seconds.is_nan() || self.duration_seconds <= 0.0) {
            return Err(WorkloadError::Invalid("durationSeconds must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_evaluation_setup() {
        let spec: WorkloadSpec =
            serde_json::from_str(r#"{"totalEntities":1000,"topology":{"kind":"centralized"}}"#).unwrap();
        assert_eq!(spec.attributes_per_entity, 100);
        assert_eq!(spec.attributes_per_query, 20);
        assert_eq!(spec.entities_per_query(), EntitiesPerQuery::Uniform { max: 100 });
        let small = WorkloadSpec::new(Topology::Centralized, 40);
        assert_eq!(small.entities_per_query().max(), 40);
    }

    #[test]
    fn too_many_query_attributes_rejected() {
        let mut spec = WorkloadSpec::new(Topology::Centralized, 10);
        spec.attributes_per_query = 101;
        assert!(matches!(spec.validate(), Err(WorkloadError::TooManyAttributes { .. })));
    }

    #[test]
    fn multi_provider_fixes_the_entity_count() {
        let topology = Topology::MultiProvider {
            providers: 10,
            entities_each: 100,
            secured: false,
        };
        assert!(WorkloadSpec::new(topology, 1000).validate().is_ok());
        assert!(WorkloadSpec::new(topology, 999).validate().is_err());
        let json = serde_json::to_value(topology).unwrap();
        assert_eq!(json["kind"], "multi-provider");
        assert_eq!(json["entitiesEach"], 100);
    }
}
