//! Node control agent, registry discovery and the cluster coordinator.

pub mod agent;
pub mod coordinator;
pub mod discovery;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::PropertySet;
use crate::engine::{EngineStatus, Phase};
use crate::metrics::{SlaMetric, SlaPolicy, DEFAULT_SLA_WINDOW_SECONDS};

pub use agent::{AgentState, TunerLease};
pub use coordinator::{ClusterStats, Command, Coordinator, FanoutError, FanoutReport, NodeOutcome};
pub use discovery::{ClusterSource, ClusterView, DiscoveryError, SourceKind};

pub const API_PREFIX: &str = "/api/v1";
pub const DEFAULT_AGENT_PORT: u16 = 8181;

pub const SLA_METRIC_PROPERTY: &str = "sla.metric";
pub const SLA_THRESHOLD_PROPERTY: &str = "sla.thresholdMs";
pub const SLA_WINDOW_PROPERTY: &str = "sla.windowSeconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Health {
    Up,
    Down,
    Starting,
}

impl Health {
    /// Registry status strings other than UP and STARTING count as down.
    pub fn from_registry(s: &str) -> Health {
        match s.to_ascii_uppercase().as_str() {
            "UP" => Health::Up,
            "STARTING" => Health::Starting,
            _ => Health::Down,
        }
    }
}

impl fmt::Display for Health {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Health::Up => "UP",
            Health::Down => "DOWN",
            Health::Starting => "STARTING",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeStatus {
    pub instance_id: String,
    pub host: String,
    pub port: u16,
    pub health: Health,
    pub phase: Option<Phase>,
    pub plugin_name: Option<String>,
    /// Pool census and backfill progress, present when reported by the agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<EngineStatus>,
}

impl NodeStatus {
    pub fn unknown(instance_id: impl Into<String>, host: impl Into<String>, port: u16, health: Health) -> Self {
        NodeStatus {
            instance_id: instance_id.into(),
            host: host.into(),
            port,
            health,
            phase: None,
            plugin_name: None,
            engine: None,
        }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}:{}{API_PREFIX}", self.host, self.port)
    }

    pub fn is_up(&self) -> bool {
        self.health == Health::Up
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyUpdate {
    pub name: String,
    /// `None` clears the runtime override.
    pub value: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackfillRequest {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LeaseRequest {
    pub owner: String,
    #[serde(default)]
    pub ttl_seconds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Optional `/stats` query overrides of the node's SLA policy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SlaQuery {
    pub sla_metric: Option<String>,
    pub sla_threshold_ms: Option<f64>,
    pub sla_window_seconds: Option<u32>,
}

impl SlaQuery {
    pub fn from_policy(policy: &SlaPolicy) -> Self {
        SlaQuery {
            sla_metric: Some(policy.metric.to_string()),
            sla_threshold_ms: Some(policy.threshold.as_secs_f64() * 1000.0),
            sla_window_seconds: Some(policy.window_seconds),
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(m) = &self.sla_metric {
            out.push(("slaMetric", m.clone()));
        }
        if let Some(t) = self.sla_threshold_ms {
            out.push(("slaThresholdMs", t.to_string()));
        }
        if let Some(w) = self.sla_window_seconds {
            out.push(("slaWindowSeconds", w.to_string()));
        }
        out
    }
}

fn threshold_from_ms(ms: f64) -> Result<Duration, String> {
    if ms.is_finite() && ms > 0.0 {
        Ok(Duration::from_secs_f64(ms / 1000.0))
    } else {
        Err(format!("SLA threshold must be a positive number of milliseconds, got {ms}"))
    }
}

/// The node's SLA policy from `sla.*` properties, with `query` applied on top.
pub fn sla_policy(props: &BTreeMap<String, String>, query: &SlaQuery) -> Result<SlaPolicy, String> {
    let mut policy = SlaPolicy::default();
    let metric = query
        .sla_metric
        .clone()
        .or_else(|| props.get(SLA_METRIC_PROPERTY).cloned());
    if let Some(m) = metric {
        policy.metric = m.parse::<SlaMetric>()?;
    }
    let threshold = match query.sla_threshold_ms {
        Some(ms) => Some(ms),
        None => props
            .get(SLA_THRESHOLD_PROPERTY)
            .map(|raw| {
                raw.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("{SLA_THRESHOLD_PROPERTY}=`{raw}` is not a number"))
            })
            .transpose()?,
    };
    if let Some(ms) = threshold {
        policy.threshold = threshold_from_ms(ms)?;
    }
    let window = match query.sla_window_seconds {
        Some(w) => w,
        None => match props.get(SLA_WINDOW_PROPERTY) {
            Some(raw) => raw
                .trim()
                .parse()
                .map_err(|_| format!("{SLA_WINDOW_PROPERTY}=`{raw}` is not an integer"))?,
            None => DEFAULT_SLA_WINDOW_SECONDS,
        },
    };
    policy.window_seconds = window;
    policy.validate()?;
    Ok(policy)
}

/// Checks that setting `name` to `value` leaves the node with a valid
/// workload and SLA configuration.
pub fn validate_update(props: &PropertySet, update: &PropertyUpdate) -> Result<(), String> {
    if update.name.trim().is_empty() {
        return Err("property name must not be empty".into());
    }
    let mut candidate = props.effective_map();
    match &update.value {
        Some(v) => {
            candidate.insert(update.name.clone(), v.clone());
        }
        None => {
            // Clearing the runtime layer falls back to the lower layers.
            let mut lower = props.layer(crate::config::Layer::Defaults).entries;
            lower.extend(props.layer(crate::config::Layer::File).entries);
            match lower.remove(&update.name) {
                Some(v) => candidate.insert(update.name.clone(), v),
                None => candidate.remove(&update.name),
            };
        }
    }
    if crate::workload::keys::ALL.contains(&update.name.as_str()) {
        crate::workload::WorkloadConfig::from_map(&candidate).map_err(|e| e.to_string())?;
    }
    if update.name.starts_with("sla.") {
        sla_policy(&candidate, &SlaQuery::default())?;
    }
    Ok(())
}
