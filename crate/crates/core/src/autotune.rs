//! Closed-loop search for the highest offered rate that meets an SLA.
//!
//! The offered rate grows geometrically while epochs pass. A violating epoch
//! shrinks the probing step (`step = 1 + (step - 1) * backoff`) and moves the
//! next probe back toward the last rate known to pass. The search converges at
//! that rate once the step falls under `convergence_epsilon`.

use std::future::Future;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::control::{
    ClusterView, Command, Coordinator, NodeStatus, PropertyUpdate, SlaQuery, API_PREFIX,
};
use crate::metrics::{SlaPolicy, MAX_WINDOW_SECONDS};
use crate::workload::keys;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TunerConfig {
    pub initial_rate: f64,
    pub max_rate: f64,
    pub increase_factor: f64,
    pub backoff_factor: f64,
    pub epoch: Duration,
    pub warmup: Duration,
    pub violation_threshold: f64,
    pub convergence_epsilon: f64,
    pub sla: SlaPolicy,
    /// Share of the rate given to reads; the rest goes to writes.
    pub read_fraction: f64,
    /// Hard stop for runaway searches.
    pub max_epochs: usize,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            initial_rate: 100.0,
            max_rate: 10_000.0,
            increase_factor: 1.25,
            backoff_factor: 0.5,
            epoch: Duration::from_secs(30),
            warmup: Duration::from_secs(10),
            violation_threshold: 0.05,
            convergence_epsilon: 0.02,
            sla: SlaPolicy::default(),
            read_fraction: 0.8,
            max_epochs: 200,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TuneError {
    #[error("invalid tuner config: {0}")]
    Config(String),
    #[error("observed violation ratio {0} is outside [0, 1]")]
    Observation(f64),
    #[error("target error: {0}")]
    Target(String),
}

impl TunerConfig {
    pub fn validate(&self) -> Result<(), TuneError> {
        let bad = |m: &str| Err(TuneError::Config(m.to_string()));
        if !(self.initial_rate > 0.0 && self.initial_rate.is_finite()) {
            return bad("initialRate must be positive");
        }
        if !(self.max_rate >= self.initial_rate && self.max_rate.is_finite()) {
            return bad("maxRate must be at least initialRate");
        }
        if !(self.increase_factor > 1.0 && self.increase_factor.is_finite()) {
            return bad("increaseFactor must exceed 1");
        }
        if !(self.backoff_factor > 0.0 && self.backoff_factor < 1.0) {
            return bad("backoffFactor must be in (0, 1)");
        }
        if self.epoch.is_zero() {
            return bad("epoch must be positive");
        }
        if !(self.violation_threshold > 0.0 && self.violation_threshold <= 1.0) {
            return bad("violationThreshold must be in (0, 1]");
        }
        if !(self.convergence_epsilon > 0.0) {
            return bad("convergenceEpsilon must be positive");
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return bad("readFraction must be in [0, 1]");
        }
        if self.max_epochs == 0 {
            return bad("maxEpochs must be positive");
        }
        self.sla.validate().map_err(TuneError::Config)
    }

    /// Trailing stats window covering one epoch, clamped to what nodes keep.
    pub fn window_seconds(&self) -> u32 {
        (self.epoch.as_secs_f64().round() as u32).clamp(1, MAX_WINDOW_SECONDS)
    }

    /// Upper bound on violating epochs before convergence.
    pub fn max_violating_epochs(&self) -> u32 {
        ((self.convergence_epsilon / (self.increase_factor - 1.0)).ln() / self.backoff_factor.ln())
            .ceil()
            .max(1.0) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TunerPhase {
    Ramping,
    BackingOff,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochRecord {
    pub epoch: usize,
    pub rate: f64,
    pub violation_ratio: f64,
    /// State after applying this epoch.
    pub phase: TunerPhase,
    pub step_multiplier: f64,
    pub last_good_rate: f64,
    pub next_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TunerState {
    pub phase: TunerPhase,
    pub current_rate: f64,
    pub last_good_rate: f64,
    pub step_multiplier: f64,
    /// Lowest rate seen violating; probes stay below it.
    pub ceiling: Option<f64>,
    pub history: Vec<EpochRecord>,
}

impl TunerState {
    pub fn new(cfg: &TunerConfig) -> Self {
        TunerState {
            phase: TunerPhase::Ramping,
            current_rate: cfg.initial_rate,
            last_good_rate: cfg.initial_rate / cfg.increase_factor,
            step_multiplier: cfg.increase_factor,
            ceiling: None,
            history: Vec::new(),
        }
    }

    pub fn converged_rate(&self) -> Option<f64> {
        (self.phase == TunerPhase::Converged).then_some(self.current_rate)
    }
}

/// Applies one epoch's observation and returns the next target rate.
/// Once converged, the converged rate is returned unchanged.
pub fn tune_step(state: &mut TunerState, cfg: &TunerConfig, observed: f64) -> Result<f64, TuneError> {
    if !(0.0..=1.0).contains(&observed) {
        return Err(TuneError::Observation(observed));
    }
    if state.phase == TunerPhase::Converged {
        return Ok(state.current_rate);
    }
    let rate = state.current_rate;
    let (phase, next) = if observed <= cfg.violation_threshold {
        state.last_good_rate = rate;
        if rate >= cfg.max_rate {
            (TunerPhase::Converged, cfg.max_rate)
        } else {
            let mut next = (rate * state.step_multiplier).min(cfg.max_rate);
            if let Some(c) = state.ceiling {
                if next >= c {
                    next = (rate + c) / 2.0;
                }
            }
            (TunerPhase::Ramping, next)
        }
    } else {
        state.step_multiplier = 1.0 + (state.step_multiplier - 1.0) * cfg.backoff_factor;
        state.ceiling = Some(state.ceiling.map_or(rate, |c| c.min(rate)));
        if rate <= state.last_good_rate {
            state.last_good_rate = rate / state.step_multiplier;
        }
        if state.step_multiplier - 1.0 < cfg.convergence_epsilon {
            (TunerPhase::Converged, state.last_good_rate)
        } else {
            let mut next = match state.phase {
                TunerPhase::Ramping => state.last_good_rate * state.step_multiplier,
                _ => state.last_good_rate,
            };
            if next >= rate {
                next = (state.last_good_rate + rate) / 2.0;
            }
            (TunerPhase::BackingOff, next)
        }
    };
    state.phase = phase;
    state.current_rate = next;
    state.history.push(EpochRecord {
        epoch: state.history.len(),
        rate,
        violation_ratio: observed,
        phase,
        step_multiplier: state.step_multiplier,
        last_good_rate: state.last_good_rate,
        next_rate: next,
    });
    Ok(next)
}

/// What the tuner drives.
pub trait TuneTarget {
    fn acquire(&self) -> impl Future<Output = Result<(), TuneError>> + Send;

    fn release(&self) -> impl Future<Output = ()> + Send;

    fn set_rates(&self, read: f64, write: f64) -> impl Future<Output = Result<(), TuneError>> + Send;

    /// Violation ratio over the trailing `window_seconds`.
    fn violation_ratio(
        &self,
        sla: &SlaPolicy,
        window_seconds: u32,
    ) -> impl Future<Output = Result<f64, TuneError>> + Send;

    fn wait(&self, d: Duration) -> impl Future<Output = ()> + Send;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TunerReport {
    pub converged_rate: Option<f64>,
    pub last_good_rate: f64,
    pub history: Vec<EpochRecord>,
    pub aborted: Option<String>,
}

impl TunerReport {
    /// One JSON object per epoch followed by a summary object.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.history {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "convergedRate": self.converged_rate,
            "lastGoodRate": self.last_good_rate,
            "epochs": self.history.len(),
            "aborted": self.aborted,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

fn split(cfg: &TunerConfig, rate: f64) -> (f64, f64) {
    (rate * cfg.read_fraction, rate * (1.0 - cfg.read_fraction))
}

/// Runs the search to convergence. Each epoch record is passed to
/// `on_epoch` as it is produced. On a target failure the run stops with a
/// partial history and rates are lowered to the last good rate when possible.
pub async fn run_autotune<T: TuneTarget>(
    target: &T,
    cfg: &TunerConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TunerReport, TuneError> {
    cfg.validate()?;
    target.acquire().await?;
    let mut state = TunerState::new(cfg);
    let outcome: Result<(), TuneError> = async {
        while state.phase != TunerPhase::Converged {
            if state.history.len() >= cfg.max_epochs {
                return Err(TuneError::Target(format!(
                    "no convergence within {} epochs",
                    cfg.max_epochs
                )));
            }
            let (r, w) = split(cfg, state.current_rate);
            target.set_rates(r, w).await?;
            target.wait(cfg.warmup + cfg.epoch).await;
            let observed = target.violation_ratio(&cfg.sla, cfg.window_seconds()).await?;
            tune_step(&mut state, cfg, observed.clamp(0.0, 1.0))?;
            on_epoch(state.history.last().expect("just pushed"));
        }
        let (r, w) = split(cfg, state.current_rate);
        target.set_rates(r, w).await
    }
    .await;
    let aborted = match outcome {
        Ok(()) => None,
        Err(e) => {
            let (r, w) = split(cfg, state.last_good_rate.min(state.current_rate));
            if let Err(reset) = target.set_rates(r, w).await {
                tracing::warn!(error = %reset, "could not lower rates after abort");
            }
            Some(e.to_string())
        }
    };
    target.release().await;
    Ok(TunerReport {
        converged_rate: state.converged_rate(),
        last_good_rate: state.last_good_rate,
        history: state.history,
        aborted,
    })
}

/// Drives the agents of a cluster view over HTTP. The same per-node rate is
/// applied to every UP node and the worst node's violation ratio is used.
pub struct HttpTarget {
    coordinator: Coordinator,
    nodes: Vec<NodeStatus>,
    owner: String,
}

impl HttpTarget {
    pub fn new(coordinator: Coordinator, view: &ClusterView, owner: impl Into<String>) -> Self {
        HttpTarget {
            coordinator,
            nodes: view.targetable().into_iter().cloned().collect(),
            owner: owner.into(),
        }
    }

    fn view(&self) -> ClusterView {
        ClusterView {
            cluster_name: "autotune".into(),
            nodes: self.nodes.clone(),
            source: crate::control::SourceKind::StaticList,
            refreshed_at: 0,
            stale: false,
            error: None,
        }
    }

    async fn set(&self, name: &str, value: f64) -> Result<(), TuneError> {
        let cmd = Command::SetProperty(PropertyUpdate {
            name: name.into(),
            value: Some(format!("{value:.3}")),
        });
        let report = self
            .coordinator
            .fanout(&self.view(), &cmd)
            .await
            .map_err(|e| TuneError::Target(e.to_string()))?;
        match report.failed().first() {
            Some(f) => Err(TuneError::Target(format!(
                "{}: {}",
                f.instance_id,
                f.message.as_deref().unwrap_or("failed")
            ))),
            None => Ok(()),
        }
    }
}

impl TuneTarget for HttpTarget {
    async fn acquire(&self) -> Result<(), TuneError> {
        if self.nodes.is_empty() {
            return Err(TuneError::Target("no targetable nodes".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let resp = self
                .coordinator
                .client()
                .post(format!("{}/tuner/lease", n.base_url()))
                .json(&crate::control::LeaseRequest {
                    owner: self.owner.clone(),
                    ttl_seconds: None,
                })
                .send()
                .await;
            let err = match resp {
                Ok(r) if r.status().is_success() => continue,
                Ok(r) if r.status() == reqwest::StatusCode::CONFLICT => {
                    format!("{}: another tuner holds the lease", n.instance_id)
                }
                Ok(r) => format!("{}: HTTP {}", n.instance_id, r.status()),
                Err(e) => format!("{}: {e}", n.instance_id),
            };
            for held in &self.nodes[..i] {
                self.release_one(held).await;
            }
            return Err(TuneError::Target(err));
        }
        Ok(())
    }

    async fn release(&self) {
        for n in &self.nodes {
            self.release_one(n).await;
        }
    }

    async fn set_rates(&self, read: f64, write: f64) -> Result<(), TuneError> {
        self.set(keys::READ_RATE_LIMIT, read).await?;
        self.set(keys::WRITE_RATE_LIMIT, write).await
    }

    async fn violation_ratio(&self, sla: &SlaPolicy, window_seconds: u32) -> Result<f64, TuneError> {
        let mut policy = *sla;
        policy.window_seconds = window_seconds;
        let query = SlaQuery::from_policy(&policy);
        let mut worst: f64 = 0.0;
        for n in &self.nodes {
            let s = self
                .coordinator
                .node_stats(n, &query)
                .await
                .map_err(|e| TuneError::Target(format!("{}: {e}", n.instance_id)))?;
            worst = worst.max(s.sla_violation_ratio);
        }
        Ok(worst)
    }

    async fn wait(&self, d: Duration) {
        tokio::time::sleep(d).await;
    }
}

impl HttpTarget {
    async fn release_one(&self, n: &NodeStatus) {
        let url = format!("http://{}:{}{API_PREFIX}/tuner/lease", n.host, n.port);
        let _ = self
            .coordinator
            .client()
            .delete(url)
            .query(&[("owner", self.owner.as_str())])
            .send()
            .await;
    }
}
