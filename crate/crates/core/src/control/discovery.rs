//! Cluster membership from a static host list or a registry document.
//!
//! Registry shape (extra fields ignored):
//! `{"application":{"name":"...","instance":[{"instanceId":"...","hostName":"...","port":{"$":8181},"status":"UP"}]}}`

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Health, NodeStatus, API_PREFIX};

/// Environment variable holding the registry base URL used to resolve
/// cluster names (`<base>/apps/<name>`).
pub const REGISTRY_ENV: &str = "BENCH_REGISTRY_URL";

pub const PROBE_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, thiserror::Error)]
pub enum DiscoveryError {
    #[error("registry request failed: {0}")]
    Unreachable(String),
    #[error("registry returned HTTP {0}")]
    Http(u16),
    #[error("malformed registry document: {0}")]
    Parse(String),
    #[error("cannot resolve cluster `{0}`: set {REGISTRY_ENV} or pass a URL or host:port list")]
    NoRegistry(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterSource {
    Static(Vec<(String, u16)>),
    Registry { name: String, url: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SourceKind {
    StaticList,
    RegistryUrl,
}

impl ClusterSource {
    /// Interprets a `--cluster` argument: an `http(s)://` URL is a registry
    /// document, a `host:port[,...]` list is static, anything else is a
    /// cluster name resolved against [`REGISTRY_ENV`].
    pub fn parse(input: &str) -> Result<ClusterSource, DiscoveryError> {
        let input = input.trim();
        if input.starts_with("http://") || input.starts_with("https://") {
            let name = input
                .trim_end_matches('/')
                .rsplit('/')
                .next()
                .unwrap_or(input)
                .to_string();
            return Ok(ClusterSource::Registry {
                name,
                url: input.to_string(),
            });
        }
        if input.contains(':') {
            if let Ok(hosts) = crate::plugins::parse_hosts(input) {
                if !hosts.is_empty() {
                    return Ok(ClusterSource::Static(hosts));
                }
            }
        }
        match std::env::var(REGISTRY_ENV) {
            Ok(base) if !base.is_empty() => Ok(ClusterSource::Registry {
                name: input.to_string(),
                url: format!("{}/apps/{input}", base.trim_end_matches('/')),
            }),
            _ => Err(DiscoveryError::NoRegistry(input.to_string())),
        }
    }

    pub fn kind(&self) -> SourceKind {
        match self {
            ClusterSource::Static(_) => SourceKind::StaticList,
            ClusterSource::Registry { .. } => SourceKind::RegistryUrl,
        }
    }

    pub fn cluster_name(&self) -> String {
        match self {
            ClusterSource::Static(_) => "static".into(),
            ClusterSource::Registry { name, .. } => name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClusterView {
    pub cluster_name: String,
    pub nodes: Vec<NodeStatus>,
    pub source: SourceKind,
    /// Unix milliseconds of the last successful refresh.
    pub refreshed_at: u64,
    /// The last refresh failed and `nodes` is from an earlier one.
    #[serde(default)]
    pub stale: bool,
    #[serde(default)]
    pub error: Option<String>,
}

impl ClusterView {
    pub fn targetable(&self) -> Vec<&NodeStatus> {
        self.nodes.iter().filter(|n| n.is_up()).collect()
    }
}

fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Deserialize)]
struct RegistryDoc {
    application: RegistryApp,
}

#[derive(Deserialize)]
struct RegistryApp {
    name: String,
    #[serde(default)]
    instance: Vec<RegistryInstance>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RegistryInstance {
    instance_id: String,
    host_name: String,
    port: RegistryPort,
    status: String,
}

#[derive(Deserialize)]
struct RegistryPort {
    #[serde(rename = "$")]
    value: serde_json::Value,
}

/// Parses a registry document into the application name and its instances
/// with registry-reported health.
pub fn parse_registry(text: &str) -> Result<(String, Vec<NodeStatus>), DiscoveryError> {
    let doc: RegistryDoc = serde_json::from_str(text).map_err(|e| DiscoveryError::Parse(e.to_string()))?;
    let nodes = doc
        .application
        .instance
        .into_iter()
        .map(|i| {
            let port = match &i.port.value {
                serde_json::Value::Number(n) => n.as_u64(),
                serde_json::Value::String(s) => s.parse().ok(),
                _ => None,
            }
            .and_then(|p| u16::try_from(p).ok())
            .ok_or_else(|| DiscoveryError::Parse(format!("bad port for `{}`", i.instance_id)))?;
            Ok(NodeStatus::unknown(
                i.instance_id,
                i.host_name,
                port,
                Health::from_registry(&i.status),
            ))
        })
        .collect::<Result<Vec<_>, DiscoveryError>>()?;
    Ok((doc.application.name, nodes))
}

/// Asks a node for its own status; any failure reports it DOWN. Nodes without
/// an id take the one they report, or `host:port` when unreachable.
pub async fn probe(client: &reqwest::Client, mut node: NodeStatus) -> NodeStatus {
    let url = format!("http://{}:{}{API_PREFIX}/status", node.host, node.port);
    let fetched = async {
        let resp = client.get(&url).timeout(PROBE_TIMEOUT).send().await.ok()?;
        if !resp.status().is_success() {
            return None;
        }
        resp.json::<NodeStatus>().await.ok()
    }
    .await;
    match fetched {
        Some(reported) => {
            node.health = reported.health;
            node.phase = reported.phase;
            node.plugin_name = reported.plugin_name;
            node.engine = reported.engine;
            if node.instance_id.is_empty() {
                node.instance_id = reported.instance_id;
            }
        }
        None => node.health = Health::Down,
    }
    if node.instance_id.is_empty() {
        node.instance_id = format!("{}:{}", node.host, node.port);
    }
    node
}

/// Refreshes membership. Registry instances not listed UP are kept but not
/// probed; UP and static nodes are probed. When the registry cannot be read
/// or parsed, `previous` (if any) is returned flagged stale.
pub async fn discover(
    client: &reqwest::Client,
    source: &ClusterSource,
    previous: Option<ClusterView>,
) -> Result<ClusterView, DiscoveryError> {
    let (name, listed) = match source {
        ClusterSource::Static(hosts) => (
            source.cluster_name(),
            hosts
                .iter()
                .map(|(h, p)| NodeStatus::unknown("", h.clone(), *p, Health::Up))
                .collect(),
        ),
        ClusterSource::Registry { url, .. } => match fetch_registry(client, url).await {
            Ok(found) => found,
            Err(e) => {
                return match previous {
                    Some(mut view) => {
                        view.stale = true;
                        view.error = Some(e.to_string());
                        Ok(view)
                    }
                    None => Err(e),
                }
            }
        },
    };
    let probes = listed.into_iter().map(|n| async move {
        if n.is_up() {
            probe(client, n).await
        } else {
            n
        }
    });
    let nodes = futures::future::join_all(probes).await;
    Ok(ClusterView {
        cluster_name: name,
        nodes,
        source: source.kind(),
        refreshed_at: unix_millis(),
        stale: false,
        error: None,
    })
}

async fn fetch_registry(client: &reqwest::Client, url: &str) -> Result<(String, Vec<NodeStatus>), DiscoveryError> {
    let resp = client
        .get(url)
        .header("Accept", "application/json")
        .timeout(PROBE_TIMEOUT * 5)
        .send()
        .await
        .map_err(|e| DiscoveryError::Unreachable(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(DiscoveryError::Http(resp.status().as_u16()));
    }
    let text = resp
        .text()
        .await
        .map_err(|e| DiscoveryError::Unreachable(e.to_string()))?;
    parse_registry(&text)
}
