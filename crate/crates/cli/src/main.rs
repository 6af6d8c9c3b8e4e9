use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use liots_bench::plot::{render_svg, PlotMetric};
use liots_bench::report::{append_jsonl, read_jsonl, write_csv};
use liots_bench::sweep::summarize;
use liots_bench::{run_once, run_sweep, RunRecord, SeedData, SummaryRow, SweepSpec, WorkloadSpec};
use liots_core::broker::{Broker, BrokerConfig};
use liots_core::clock::system_clock;
use liots_core::cm::{CmConfig, ContextManager};
use liots_core::discovery::{Discovery, DiscoveryConfig};
use liots_core::federation::{
    assemble_domain, assemble_federation, AssemblyOptions, DomainSpec, FederationSpec, FederationStatus,
};
use liots_core::model::wire::{Ack, UpdateContextRequest, UPDATE_CONTEXT};
use liots_core::net::{bind, serve, WireClient};
use liots_core::registrar::{Registrar, RegistrarConfig};
use liots_core::security::{Authority, AuthorityConfig, Pep, PepConfig};

const DEFAULT_STATUS_FILE: &str = "liots-status.json";

#[derive(Parser)]
#[command(name = "liots", version, about = "Federated IoT context exchange")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every service of one domain in this process.
    Domain {
        #[command(subcommand)]
        action: UpAction,
    },
    /// Run a federation of domains (and super-domains) in this process.
    Federation {
        #[command(subcommand)]
        action: UpAction,
    },
    /// Probe the services listed in a status file.
    Status {
        #[arg(long, default_value = DEFAULT_STATUS_FILE)]
        status_file: PathBuf,
    },
    /// Run a single service from its JSON config.
    Serve { kind: ServiceKind, config: PathBuf },
    /// Generate load and report latency and throughput.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
}

#[derive(Subcommand)]
enum UpAction {
    Up {
        spec: PathBuf,
        /// Where the endpoint listing is written.
        #[arg(long, default_value = DEFAULT_STATUS_FILE)]
        status_file: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ServiceKind {
    Cm,
    Discovery,
    Broker,
    Registrar,
    Authority,
    Pep,
}

#[derive(Subcommand)]
enum BenchAction {
    /// Write the deterministic dataset of a workload; with --target also
    /// publish it to a running CM.
    Seed {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        token: Option<String>,
    },
    /// Start the workload's topology, seed it and measure one run.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare recorded runs against the centralized run of the same size.
    Compare {
        /// runs.jsonl as written by `run` or `sweep`.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole entity-count × topology × client-count matrix.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render latency and throughput charts from runs.jsonl.
    Plot {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_status(path: &Path, status: &FederationStatus) -> Result<()> {
    let json = serde_json::to_string_pretty(status)?;
    std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    println!("{json}");
    Ok(())
}

async fn until_interrupted() -> Result<()> {
    tokio::signal::ctrl_c().await?;
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Domain {
            action: UpAction::Up { spec, status_file },
        } => {
            let spec: DomainSpec = read_json(&spec)?;
            let domain = assemble_domain(&spec, AssemblyOptions::default()).await?;
            write_status(
                &status_file,
                &FederationStatus {
                    federation_id: domain.domain_id.clone(),
                    domains: vec![domain.endpoints.clone()],
                    replicas: Vec::new(),
                },
            )?;
            until_interrupted().await
        }
        Command::Federation {
            action: UpAction::Up { spec, status_file },
        } => {
            let spec: FederationSpec = read_json(&spec)?;
            let federation = assemble_federation(&spec, AssemblyOptions::default()).await?;
            write_status(&status_file, &federation.status())?;
            until_interrupted().await
        }
        Command::Status { status_file } => status(&status_file).await,
        Command::Serve { kind, config } => serve_one(kind, &config).await,
        Command::Bench { action } => bench(action).await,
    }
}

fn endpoints_in(value: &serde_json::Value, out: &mut BTreeSet<String>) {
    match value {
        serde_json::Value::String(s) if s.starts_with("http://") || s.starts_with("https://") => {
            out.insert(s.clone());
        }
        serde_json::Value::Array(items) => items.iter().for_each(|v| endpoints_in(v, out)),
        serde_json::Value::Object(map) => map.values().for_each(|v| endpoints_in(v, out)),
        _ => {}
    }
}

async fn status(path: &Path) -> Result<()> {
    let value: serde_json::Value = read_json(path)?;
    let mut endpoints = BTreeSet::new();
    endpoints_in(&value, &mut endpoints);
    let client = WireClient::new();
    let mut down = 0;
    for endpoint in &endpoints {
        match client.get_status(endpoint).await {
            Ok(200) => println!("up    {endpoint}"),
            Ok(code) => {
                down += 1;
                println!("down  {endpoint} (status {code})");
            }
            Err(e) => {
                down += 1;
                println!("down  {endpoint} ({e})");
            }
        }
    }
    if down > 0 {
        bail!("{down} of {} services not answering", endpoints.len());
    }
    Ok(())
}

async fn serve_one(kind: ServiceKind, config: &Path) -> Result<()> {
    let client = WireClient::new();
    let clock = system_clock();
    let mut background = Vec::new();
    let (listener, endpoint, router) = match kind {
        ServiceKind::Cm => {
            let cfg: CmConfig = read_json(config)?;
            let (listener, endpoint) = bind(&cfg.listen).await?;
            let cm = ContextManager::new(&cfg, &endpoint, client, clock)?;
            background.extend(cm.spawn_announcer());
            (listener, endpoint, cm.router())
        }
        ServiceKind::Discovery => {
            let cfg: DiscoveryConfig = read_json(config)?;
            let (listener, endpoint) = bind(&cfg.listen).await?;
            let discovery = Discovery::new(&cfg, client, clock);
            background.push(discovery.spawn_sweeper());
            (listener, endpoint, discovery.router())
        }
        ServiceKind::Broker => {
            let cfg: BrokerConfig = read_json(config)?;
            cfg.validate().map_err(anyhow::Error::msg)?;
            let (listener, endpoint) = bind(&cfg.listen).await?;
            let broker = Broker::new(&cfg, &endpoint, client, clock);
            (listener, endpoint, broker.router())
        }
        ServiceKind::Registrar => {
            let cfg: RegistrarConfig = read_json(config)?;
            let (listener, endpoint) = bind(&cfg.listen).await?;
            let registrar = Registrar::new(&cfg, &endpoint, client, clock)?;
            background.push(registrar.spawn());
            (listener, endpoint, registrar.router())
        }
        ServiceKind::Authority => {
            let cfg: AuthorityConfig = read_json(config)?;
            let (listener, endpoint) = bind(&cfg.listen).await?;
            let authority = Authority::new(&cfg, client, clock)?;
            (listener, endpoint, authority.router())
        }
        ServiceKind::Pep => {
            let cfg: PepConfig = read_json(config)?;
            let (listener, endpoint) = bind(&cfg.listen).await?;
            let pep = Pep::new(&cfg, client);
            (listener, endpoint, pep.router())
        }
    };
    let _service = serve(listener, endpoint.clone(), router);
    println!("{}", serde_json::json!({ "endpoint": endpoint }));
    until_interrupted().await?;
    for task in background {
        task.abort();
    }
    Ok(())
}

async fn bench(action: BenchAction) -> Result<()> {
    match action {
        BenchAction::Seed {
            spec,
            out,
            target,
            token,
        } => {
            let spec: WorkloadSpec = read_json(&spec)?;
            spec.validate()?;
            std::fs::create_dir_all(&out)?;
            let data = SeedData::generate(spec.seed, spec.total_entities, spec.attributes_per_entity);
            let path = out.join("seed.jsonl");
            let _ = std::fs::remove_file(&path);
            let elements = data.partitions(data.len().max(1)).concat();
            for e in &elements {
                append_jsonl(&path, e)?;
            }
            if let Some(target) = target {
                let client = WireClient::new();
                for batch in elements.chunks(200) {
                    client
                        .post::<_, Ack>(
                            &target,
                            UPDATE_CONTEXT,
                            &UpdateContextRequest {
                                context_elements: batch.to_vec(),
                            },
                            token.as_deref(),
                        )
                        .await
                        .with_context(|| format!("publishing to {target}"))?;
                }
            }
            println!("{} entities written to {}", elements.len(), path.display());
            Ok(())
        }
        BenchAction::Run { spec, out } => {
            let spec: WorkloadSpec = read_json(&spec)?;
            std::fs::create_dir_all(&out)?;
            let record = run_once(&spec).await?;
            let runs = out.join("runs.jsonl");
            append_jsonl(&runs, &record)?;
            write_csv(&out.join("summary.csv"), &read_jsonl::<RunRecord>(&runs)?)?;
            println!("{}", serde_json::to_string_pretty(&record.metrics)?);
            Ok(())
        }
        BenchAction::Compare { spec, out } => {
            let records: Vec<RunRecord> = read_jsonl(&spec)?;
            std::fs::create_dir_all(&out)?;
            let outcome = summarize(records);
            let path = out.join("comparisons.jsonl");
            let _ = std::fs::remove_file(&path);
            for c in &outcome.comparisons {
                append_jsonl(&path, c)?;
            }
            std::fs::write(out.join("trends.json"), serde_json::to_vec_pretty(&outcome.trends)?)?;
            for c in &outcome.comparisons {
                let c2 = &c.comparison;
                println!(
                    "{} vs {} ({} entities, {} clients): latency p50 x{:.2}, throughput x{:.2}",
                    c2.a_label,
                    c2.b_label,
                    c.total_entities,
                    c.clients,
                    c2.latency_ratio_p50,
                    c2.normalized_throughput_ratio
                );
            }
            Ok(())
        }
        BenchAction::Sweep { spec, out } => {
            let spec: SweepSpec = read_json(&spec)?;
            let outcome = run_sweep(&spec, &out).await?;
            println!("{} runs written to {}", outcome.records.len(), out.display());
            Ok(())
        }
        BenchAction::Plot { spec, out } => {
            let records: Vec<RunRecord> = read_jsonl(&spec)?;
            let rows: Vec<SummaryRow> = records.iter().map(SummaryRow::from).collect();
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("latency.svg"), render_svg(&rows, PlotMetric::LatencyP50))?;
            std::fs::write(out.join("throughput.svg"), render_svg(&rows, PlotMetric::NormalizedThroughput))?;
            println!("charts written to {}", out.display());
            Ok(())
        }
    }
}
