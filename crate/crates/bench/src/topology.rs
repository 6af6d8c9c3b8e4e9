use std::time::{Duration, Instant};

use liots_core::clock::system_clock;
use liots_core::cm::{CmConfig, ContextManager};
use liots_core::federation::{
    assemble_domain, assemble_federation, AssemblyError, AssemblyOptions, DomainHandle, DomainSpec, FederationHandle,
    FederationSpec, ProviderSpec,
};
use liots_core::model::wire::QUERY_CONTEXT;
use liots_core::model::{EntityRef, QueryRequest, QueryResponse};
use liots_core::net::{bind_loopback, serve, ServiceHandle, WireClient};
use liots_core::security::{Identity, IdentityKind};

use crate::data::{SeedData, ENTITY_TYPE};
use crate::workload::{Topology, WorkloadSpec};

const BENCH_USER: &str = "bench-client";
const BENCH_SECRET: &str = "bench-secret";
const SEED_BATCH: usize = 200;
/// Brokers wait this long for providers; saturated runs queue at the CMs
/// far beyond the interactive default.
const FANOUT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("publishing seed data: {0}")]
    Publish(String),
    #[error("topology did not become ready: {0}")]
    NotReady(String),
}

#[allow(dead_code)]
enum Keep {
    Service(ServiceHandle),
    Domain(Box<DomainHandle>),
    Federation(Box<FederationHandle>),
}

/// A started topology and where its clients send queries.
pub struct RunningTopology {
    pub topology: Topology,
    pub query_endpoint: String,
    pub token: Option<String>,
    /// CMs in partition order.
    pub providers: Vec<ContextManager>,
    pub client: WireClient,
    _keep: Keep,
}

impl RunningTopology {
    pub async fn start(spec: &WorkloadSpec) -> Result<Self, SetupError> {
        let provider = |name: &str| ProviderSpec {
            service_delay_ms: spec.cm_service_delay_ms,
            service_concurrency: spec.cm_service_concurrency,
            ..ProviderSpec::named(name)
        };
        let user = || vec![Identity::new(BENCH_USER, IdentityKind::User, BENCH_SECRET)];
        let client = WireClient::new();
        match spec.topology {
            Topology::Centralized => {
                let (listener, endpoint) = bind_loopback().await?;
                let cm = ContextManager::new(
                    &CmConfig {
                        service_delay_ms: spec.cm_service_delay_ms,
                        service_concurrency: spec.cm_service_concurrency,
                        ..CmConfig::default()
                    },
                    &endpoint,
                    client.clone(),
                    system_clock(),
                )?;
                let handle = serve(listener, endpoint.clone(), cm.router());
                Ok(Self {
                    topology: spec.topology,
                    query_endpoint: endpoint,
                    token: None,
                    providers: vec![cm],
                    client,
                    _keep: Keep::Service(handle),
                })
            }
            Topology::FederatedSecured | Topology::FederatedUnsecured => {
                let secured = spec.topology == Topology::FederatedSecured;
                let mut owner = DomainSpec::new("owner");
                owner.providers = vec![provider("store")];
                let mut edge = DomainSpec::new("edge");
                edge.users = user();
                for d in [&mut owner, &mut edge] {
                    d.secured = secured;
                    d.fanout_timeout_ms = FANOUT_TIMEOUT_MS;
                }
                let fed = assemble_federation(
                    &FederationSpec::new("bench", vec![owner, edge]),
                    AssemblyOptions::default(),
                )
                .await?;
                let edge = fed.domain("edge").expect("assembled");
                let token = if secured {
                    Some(edge.user_token(BENCH_USER).map_err(AssemblyError::from)?)
                } else {
                    None
                };
                let cm = fed.domain("owner").expect("assembled").providers["store"].clone();
                Ok(Self {
                    topology: spec.topology,
                    query_endpoint: edge.app_endpoint().to_owned(),
                    token,
                    providers: vec![cm],
                    client,
                    _keep: Keep::Federation(Box::new(fed)),
                })
            }
            Topology::MultiProvider {
                providers, secured, ..
            } => {
                let mut domain = DomainSpec::new("multi");
                domain.secured = secured;
                domain.fanout_timeout_ms = FANOUT_TIMEOUT_MS;
                domain.users = user();
                domain.providers = (0..providers).map(|i| provider(&format!("cm{i:03}"))).collect();
                let handle = assemble_domain(&domain, AssemblyOptions::default()).await?;
                let token = if secured {
                    Some(handle.user_token(BENCH_USER).map_err(AssemblyError::from)?)
                } else {
                    None
                };
                Ok(Self {
                    topology: spec.topology,
                    query_endpoint: handle.app_endpoint().to_owned(),
                    token,
                    providers: handle.providers.values().cloned().collect(),
                    client,
                    _keep: Keep::Domain(Box::new(handle)),
                })
            }
        }
    }

    /// Publish the dataset, partitioned across providers, and wait until
    /// every partition is reachable through the query endpoint.
    pub async fn seed(&self, data: &SeedData) -> Result<(), SetupError> {
        let each = data.len().div_ceil(self.providers.len()).max(1);
        let parts = data.partitions(each);
        for (cm, part) in self.providers.iter().zip(&parts) {
            for batch in part.chunks(SEED_BATCH) {
                cm.publish(batch.to_vec())
                    .map_err(|e| SetupError::Publish(e.to_string()))?;
            }
            if !cm.announce_now().await {
                return Err(SetupError::Publish("announcement rejected".into()));
            }
        }
        let mut probes: Vec<String> = Vec::new();
        for part in &parts {
            if let (Some(first), Some(last)) = (part.first(), part.last()) {
                probes.push(first.entity.id.clone());
                probes.push(last.entity.id.clone());
            }
        }
        self.wait_reachable(&probes, Duration::from_secs(60)).await
    }

    async fn wait_reachable(&self, ids: &[String], within: Duration) -> Result<(), SetupError> {
        let q = QueryRequest::new(
            ids.iter().map(|id| EntityRef::new(id.clone(), ENTITY_TYPE)).collect(),
            Vec::new(),
        );
        let start = Instant::now();
        loop {
            let answered = self.query(&q).await;
            let found = answered.as_ref().map_or(0, |r| r.context_elements.len());
            if found == ids.len() {
                return Ok(());
            }
            if start.elapsed() > within {
                return Err(SetupError::NotReady(format!("{found} of {} probe entities reachable", ids.len())));
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }

    pub async fn query(&self, q: &QueryRequest) -> Result<QueryResponse, liots_core::net::CallError> {
        self.client
            .post(&self.query_endpoint, QUERY_CONTEXT, q, self.token.as_deref())
            .await
    }
}
