//! Stateless cluster coordinator: command fanout and statistics aggregation.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackfillRequest, ClusterView, ErrorBody, NodeStatus, PropertyUpdate, SlaQuery};
use crate::engine::Which;
use crate::metrics::{OpStats, StatsSnapshot};

pub const NODE_DEADLINE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Start(Which),
    Stop(Which),
    Backfill { start: u64, end: u64 },
    SetProperty(PropertyUpdate),
    ResetStats,
}

impl Command {
    fn path(&self) -> String {
        match self {
            Command::Start(w) => format!("/workload/start?which={w}"),
            Command::Stop(w) => format!("/workload/stop?which={w}"),
            Command::Backfill { .. } => "/backfill".into(),
            Command::SetProperty(_) => "/properties".into(),
            Command::ResetStats => "/stats/reset".into(),
        }
    }

    fn body(&self) -> Option<serde_json::Value> {
        match self {
            Command::Backfill { start, end } => serde_json::to_value(BackfillRequest {
                start: *start,
                end: *end,
            })
            .ok(),
            Command::SetProperty(u) => serde_json::to_value(u).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeOutcome {
    pub instance_id: String,
    pub ok: bool,
    pub http_status: Option<u16>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FanoutReport {
    pub outcomes: Vec<NodeOutcome>,
}

impl FanoutReport {
    pub fn succeeded(&self) -> Vec<&str> {
        self.outcomes.iter().filter(|o| o.ok).map(|o| o.instance_id.as_str()).collect()
    }

    pub fn failed(&self) -> Vec<&NodeOutcome> {
        self.outcomes.iter().filter(|o| !o.ok).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FanoutError {
    #[error("no targetable nodes")]
    NoTargets,
    #[error("all nodes failed: {}", describe(.0))]
    AllFailed(FanoutReport),
}

fn describe(r: &FanoutReport) -> String {
    r.outcomes
        .iter()
        .map(|o| format!("{}: {}", o.instance_id, o.message.as_deref().unwrap_or("failed")))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClusterStats {
    pub cluster: StatsSnapshot,
    pub nodes: BTreeMap<String, StatsSnapshot>,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    client: reqwest::Client,
    deadline: Duration,
}

impl Default for Coordinator {
    fn default() -> Self {
        Self::new()
    }
}

impl Coordinator {
    pub fn new() -> Self {
        Self::with_deadline(NODE_DEADLINE)
    }

    pub fn with_deadline(deadline: Duration) -> Self {
        Coordinator {
            client: reqwest::Client::new(),
            deadline,
        }
    }

    pub fn client(&self) -> &reqwest::Client {
        &self.client
    }

    /// Sends `command` to every UP node concurrently. Succeeds when at least
    /// one node acknowledged.
    pub async fn fanout(&self, view: &ClusterView, command: &Command) -> Result<FanoutReport, FanoutError> {
        let targets = view.targetable();
        if targets.is_empty() {
            return Err(FanoutError::NoTargets);
        }
        let sends = targets.into_iter().map(|n| self.send(n, command));
        let report = FanoutReport {
            outcomes: futures::future::join_all(sends).await,
        };
        if report.outcomes.iter().any(|o| o.ok) {
            Ok(report)
        } else {
            Err(FanoutError::AllFailed(report))
        }
    }

    pub async fn send(&self, node: &NodeStatus, command: &Command) -> NodeOutcome {
        let url = format!("{}{}", node.base_url(), command.path());
        let mut req = self.client.post(&url).timeout(self.deadline);
        if let Some(body) = command.body() {
            req = req.json(&body);
        }
        let outcome = |ok, http_status, message| NodeOutcome {
            instance_id: node.instance_id.clone(),
            ok,
            http_status,
            message,
        };
        match req.send().await {
            Err(e) => outcome(false, None, Some(e.to_string())),
            Ok(resp) => {
                let code = resp.status();
                if code.is_success() {
                    outcome(true, Some(code.as_u16()), None)
                } else {
                    let msg = resp
                        .json::<ErrorBody>()
                        .await
                        .map(|b| b.error)
                        .unwrap_or_else(|_| code.to_string());
                    outcome(false, Some(code.as_u16()), Some(msg))
                }
            }
        }
    }

    pub async fn node_stats(&self, node: &NodeStatus, sla: &SlaQuery) -> Result<StatsSnapshot, String> {
        let resp = self
            .client
            .get(format!("{}/stats", node.base_url()))
            .query(&sla.to_pairs())
            .timeout(self.deadline)
            .send()
            .await
            .map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            let code = resp.status();
            return Err(resp
                .json::<ErrorBody>()
                .await
                .map(|b| b.error)
                .unwrap_or_else(|_| code.to_string()));
        }
        resp.json().await.map_err(|e| e.to_string())
    }

    /// Collects `/stats` from every UP node and merges them.
    pub async fn aggregate_stats(&self, view: &ClusterView, sla: &SlaQuery) -> ClusterStats {
        let targets = view.targetable();
        let fetches = targets.iter().map(|n| self.node_stats(n, sla));
        let results = futures::future::join_all(fetches).await;
        let mut nodes = BTreeMap::new();
        let mut missing = Vec::new();
        for (n, r) in targets.iter().zip(results) {
            match r {
                Ok(s) => {
                    nodes.insert(n.instance_id.clone(), s);
                }
                Err(e) => {
                    tracing::warn!(node = %n.instance_id, error = %e, "stats unavailable");
                    missing.push(n.instance_id.clone());
                }
            }
        }
        let cluster = merge_snapshots(nodes.values());
        ClusterStats {
            cluster,
            nodes,
            missing,
        }
    }
}

/// Sums counts and rates, merges histograms bucket-wise, recomputes the hit
/// ratio from summed hits and misses, and weights violation ratios by each
/// node's operation count.
pub fn merge_snapshots<'a>(parts: impl IntoIterator<Item = &'a StatsSnapshot>) -> StatsSnapshot {
    let parts: Vec<&StatsSnapshot> = parts.into_iter().collect();
    let merge_op = |f: fn(&StatsSnapshot) -> &OpStats| {
        let ops: Vec<&OpStats> = parts.iter().map(|p| f(p)).collect();
        OpStats::merge(&ops).unwrap_or_else(|e| {
            tracing::warn!(error = %e, "incompatible bucket vectors");
            OpStats::default()
        })
    };
    let read = merge_op(|s| &s.read);
    let write = merge_op(|s| &s.write);
    let cache_hits: u64 = parts.iter().map(|p| p.cache_hits).sum();
    let cache_misses: u64 = parts.iter().map(|p| p.cache_misses).sum();
    let lookups = cache_hits + cache_misses;
    let weight: u64 = parts.iter().map(|p| p.total_ops()).sum();
    let sla_violation_ratio = if weight == 0 {
        0.0
    } else {
        parts
            .iter()
            .map(|p| p.sla_violation_ratio * p.total_ops() as f64)
            .sum::<f64>()
            / weight as f64
    };
    StatsSnapshot {
        timestamp_ms: parts.iter().map(|p| p.timestamp_ms).max().unwrap_or(0),
        read,
        write,
        cache_hits,
        cache_misses,
        cache_hit_ratio: (lookups > 0).then(|| cache_hits as f64 / lookups as f64),
        sla_violation_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Metrics, OpStatus, OpType};
    use rand::{Rng, SeedableRng};

    #[test]
    fn merged_counts_add_up() {
        let a = Metrics::new();
        let b = Metrics::new();
        for _ in 0..1000 {
            a.record(OpType::Read, OpStatus::Success, Duration::from_micros(100));
            b.record(OpType::Read, OpStatus::Success, Duration::from_micros(300));
        }
        b.record_with_cache(OpType::Read, OpStatus::Success, Duration::from_micros(5), Some(true));
        let m = merge_snapshots([&a.snapshot(), &b.snapshot()]);
        assert_eq!(m.read.success, 2001);
        assert_eq!(m.cache_hit_ratio, Some(1.0));
        assert_eq!(m.write.total(), 0);
    }

    #[test]
    fn merged_p99_matches_concatenated_samples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (Metrics::new(), Metrics::new());
        let mut all = Vec::new();
        for i in 0..20_000 {
            let us: u64 = if i % 2 == 0 {
                rng.random_range(50..5_000)
            } else {
                rng.random_range(1_000..80_000)
            };
            all.push(us);
            let m = if i % 2 == 0 { &a } else { &b };
            m.record(OpType::Write, OpStatus::Success, Duration::from_micros(us));
        }
        all.sort_unstable();
        let oracle = all[(0.99 * all.len() as f64).ceil() as usize - 1] as f64;
        let merged = merge_snapshots([&a.snapshot(), &b.snapshot()]).write.p99_us;
        // One bucket is 4% wide.
        assert!((merged - oracle).abs() <= oracle * 0.04 + 1.0, "{merged} vs {oracle}");
    }

    #[test]
    fn empty_merge_is_zero() {
        let m = merge_snapshots(std::iter::empty());
        assert_eq!(m.total_ops(), 0);
        assert_eq!(m.cache_hit_ratio, None);
    }

    #[tokio::test]
    async fn fanout_to_empty_view_fails() {
        let view = ClusterView {
            cluster_name: "c".into(),
            nodes: vec![NodeStatus::unknown("n", "127.0.0.1", 1, super::super::Health::Down)],
            source: super::super::SourceKind::StaticList,
            refreshed_at: 0,
            stale: false,
            error: None,
        };
        let err = Coordinator::new().fanout(&view, &Command::ResetStats).await.unwrap_err();
        assert_eq!(err.to_string(), "no targetable nodes");
    }
}
