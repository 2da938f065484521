//! Per-node operation statistics.
//!
//! Cumulative counters and histograms live alongside a ring of one-second
//! slots used for trailing-window rates and SLA evaluation. All state has a
//! fixed size, so a node can record forever.

pub mod histogram;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use histogram::{HistogramSnapshot, LatencyHistogram};

/// Seconds of history kept for windowed queries.
pub const MAX_WINDOW_SECONDS: u32 = 120;
pub const RATE_WINDOW_SECONDS: u64 = 10;
pub const DEFAULT_SLA_WINDOW_SECONDS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpType {
    Read,
    Write,
}

impl OpType {
    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpStatus {
    Success,
    NotFound,
    Failure,
    Timeout,
}

impl OpStatus {
    pub const ALL: [OpStatus; 4] = [
        OpStatus::Success,
        OpStatus::NotFound,
        OpStatus::Failure,
        OpStatus::Timeout,
    ];

    fn idx(self) -> usize {
        self as usize
    }

    /// The store answered; the latency is a real service time.
    pub fn is_answered(self) -> bool {
        matches!(self, OpStatus::Success | OpStatus::NotFound)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SlaMetric {
    P99,
    P95,
    Avg,
    PerOp,
}

impl std::str::FromStr for SlaMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p99" => Ok(SlaMetric::P99),
            "p95" => Ok(SlaMetric::P95),
            "avg" => Ok(SlaMetric::Avg),
            "perOp" => Ok(SlaMetric::PerOp),
            other => Err(format!("unknown SLA metric `{other}` (expected p99, p95, avg or perOp)")),
        }
    }
}

impl std::fmt::Display for SlaMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SlaMetric::P99 => "p99",
            SlaMetric::P95 => "p95",
            SlaMetric::Avg => "avg",
            SlaMetric::PerOp => "perOp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlaPolicy {
    pub metric: SlaMetric,
    pub threshold: Duration,
    pub window_seconds: u32,
}

impl Default for SlaPolicy {
    fn default() -> Self {
        SlaPolicy {
            metric: SlaMetric::P99,
            threshold: Duration::from_millis(10),
            window_seconds: DEFAULT_SLA_WINDOW_SECONDS,
        }
    }
}

impl SlaPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.threshold.is_zero() {
            return Err("SLA threshold must be positive".into());
        }
        if self.window_seconds == 0 || self.window_seconds > MAX_WINDOW_SECONDS {
            return Err(format!(
                "SLA window must be in [1, {MAX_WINDOW_SECONDS}] seconds"
            ));
        }
        Ok(())
    }
}

struct OpCounters {
    by_status: [AtomicU64; 4],
    latency: LatencyHistogram,
}

impl OpCounters {
    fn new() -> Self {
        OpCounters {
            by_status: Default::default(),
            latency: LatencyHistogram::new(),
        }
    }
}

struct Slot {
    second: u64,
    counts: [[u64; 4]; 2],
    // Answered ops of both types.
    latency: HistogramSnapshot,
}

impl Slot {
    fn new() -> Self {
        Slot {
            second: u64::MAX,
            counts: [[0; 4]; 2],
            latency: HistogramSnapshot::default(),
        }
    }

    fn roll(&mut self, second: u64) {
        if self.second != second {
            self.second = second;
            self.counts = [[0; 4]; 2];
            self.latency.clear();
        }
    }
}

struct Inner {
    started: Instant,
    ops: [OpCounters; 2],
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    slots: Box<[Mutex<Slot>]>,
}

impl Inner {
    fn new() -> Self {
        Inner {
            started: Instant::now(),
            ops: [OpCounters::new(), OpCounters::new()],
            cache_hits: AtomicU64::new(0),
            cache_misses: AtomicU64::new(0),
            slots: (0..MAX_WINDOW_SECONDS).map(|_| Mutex::new(Slot::new())).collect(),
        }
    }

    fn second_at(&self, now: Instant) -> u64 {
        now.saturating_duration_since(self.started).as_secs()
    }

    /// Ops per second by type over whole seconds `(current - len, current]`
    /// merged view, and the merged latency histogram.
    fn window(&self, now: Instant, len: u64, include_current: bool) -> WindowView {
        let current = self.second_at(now);
        let (from, to) = if include_current {
            (current.saturating_sub(len - 1), current)
        } else if current == 0 {
            (1, 0)
        } else {
            (current.saturating_sub(len), current - 1)
        };
        let mut view = WindowView {
            counts: [[0; 4]; 2],
            latency: HistogramSnapshot::default(),
            seconds: if from <= to { to - from + 1 } else { 0 },
        };
        if from > to {
            return view;
        }
        for second in from..=to {
            let slot = self.slots[(second % MAX_WINDOW_SECONDS as u64) as usize].lock();
            if slot.second != second {
                continue;
            }
            for op in 0..2 {
                for st in 0..4 {
                    view.counts[op][st] += slot.counts[op][st];
                }
            }
            let _ = view.latency.merge(&slot.latency);
        }
        view
    }
}

struct WindowView {
    counts: [[u64; 4]; 2],
    latency: HistogramSnapshot,
    seconds: u64,
}

impl WindowView {
    fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn unanswered(&self) -> u64 {
        self.counts
            .iter()
            .map(|c| c[OpStatus::Failure.idx()] + c[OpStatus::Timeout.idx()])
            .sum()
    }
}

/// Thread-safe statistics sink shared by all workers of a node.
pub struct Metrics {
    inner: RwLock<Arc<Inner>>,
    policy: RwLock<SlaPolicy>,
}

impl Default for Metrics {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Metrics").field("policy", &*self.policy.read()).finish()
    }
}

impl Metrics {
    pub fn new() -> Self {
        Metrics {
            inner: RwLock::new(Arc::new(Inner::new())),
            policy: RwLock::new(SlaPolicy::default()),
        }
    }

    pub fn sla_policy(&self) -> SlaPolicy {
        *self.policy.read()
    }

    pub fn set_sla_policy(&self, policy: SlaPolicy) -> Result<(), String> {
        policy.validate()?;
        *self.policy.write() = policy;
        Ok(())
    }

    pub fn record(&self, op: OpType, status: OpStatus, latency: Duration) {
        self.record_with_cache(op, status, latency, None);
    }

    pub fn record_with_cache(
        &self,
        op: OpType,
        status: OpStatus,
        latency: Duration,
        cache_hit: Option<bool>,
    ) {
        let inner = self.inner.read();
        let counters = &inner.ops[op.idx()];
        counters.by_status[status.idx()].fetch_add(1, Ordering::Relaxed);
        if status.is_answered() {
            counters.latency.record(latency);
        }
        match cache_hit {
            Some(true) => {
                inner.cache_hits.fetch_add(1, Ordering::Relaxed);
            }
            Some(false) => {
                inner.cache_misses.fetch_add(1, Ordering::Relaxed);
            }
            None => {}
        }
        let second = inner.second_at(Instant::now());
        let mut slot = inner.slots[(second % MAX_WINDOW_SECONDS as u64) as usize].lock();
        slot.roll(second);
        slot.counts[op.idx()][status.idx()] += 1;
        if status.is_answered() {
            slot.latency.record(latency);
        }
    }

    /// Zeroes everything in one step; concurrent snapshots see either the old
    /// or the new state.
    pub fn reset(&self) {
        *self.inner.write() = Arc::new(Inner::new());
    }

    /// Violation ratio over the trailing `policy.window_seconds`, including
    /// the current partial second.
    pub fn sla_violation_ratio(&self, policy: &SlaPolicy) -> f64 {
        let inner = self.inner.read().clone();
        let view = inner.window(Instant::now(), policy.window_seconds.max(1) as u64, true);
        violation_ratio(&view, policy)
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        self.snapshot_with(&self.sla_policy())
    }

    pub fn snapshot_with(&self, policy: &SlaPolicy) -> StatsSnapshot {
        let inner = self.inner.read().clone();
        let now = Instant::now();
        let rate_view = inner.window(now, RATE_WINDOW_SECONDS, false);
        let sla_view = inner.window(now, policy.window_seconds.max(1) as u64, true);
        let elapsed = now.saturating_duration_since(inner.started).as_secs_f64();
        let op_stats = |op: OpType| {
            let c = &inner.ops[op.idx()];
            let counts: Vec<u64> = c
                .by_status
                .iter()
                .map(|a| a.load(Ordering::Relaxed))
                .collect();
            let windowed: u64 = rate_view.counts[op.idx()].iter().sum();
            let rps = if rate_view.seconds > 0 {
                windowed as f64 / rate_view.seconds as f64
            } else if elapsed > 0.0 {
                counts.iter().sum::<u64>() as f64 / elapsed
            } else {
                0.0
            };
            OpStats::from_parts(&counts, rps, c.latency.snapshot())
        };
        let hits = inner.cache_hits.load(Ordering::Relaxed);
        let misses = inner.cache_misses.load(Ordering::Relaxed);
        StatsSnapshot {
            timestamp_ms: unix_millis(),
            read: op_stats(OpType::Read),
            write: op_stats(OpType::Write),
            cache_hits: hits,
            cache_misses: misses,
            cache_hit_ratio: (hits + misses > 0).then(|| hits as f64 / (hits + misses) as f64),
            sla_violation_ratio: violation_ratio(&sla_view, policy),
        }
    }

    /// Bytes of recording state, which does not depend on how much has been
    /// recorded.
    pub fn memory_footprint(&self) -> usize {
        let inner = self.inner.read();
        let hist = inner.ops[0].latency.memory_footprint() * 2;
        let slot = std::mem::size_of::<Mutex<Slot>>()
            + inner.slots[0].lock().latency.buckets.capacity() * 8;
        hist + slot * inner.slots.len() + std::mem::size_of::<Inner>()
    }
}

fn violation_ratio(view: &WindowView, policy: &SlaPolicy) -> f64 {
    let total = view.total();
    if total == 0 {
        return 0.0;
    }
    let threshold_us = policy.threshold.as_nanos() as f64 / 1000.0;
    let breached = |v: f64| if v > threshold_us { 1.0 } else { 0.0 };
    match policy.metric {
        SlaMetric::PerOp => {
            let bad = view.latency.count_above(policy.threshold) + view.unanswered();
            (bad as f64 / total as f64).clamp(0.0, 1.0)
        }
        SlaMetric::P99 => breached(view.latency.percentile_us(0.99)),
        SlaMetric::P95 => breached(view.latency.percentile_us(0.95)),
        SlaMetric::Avg => breached(view.latency.mean_us()),
    }
}

fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Statistics for one operation type. Serialized field names follow the
/// agent's `/stats` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpStats {
    pub success: u64,
    #[serde(rename = "notFound")]
    pub not_found: u64,
    pub failure: u64,
    pub timeout: u64,
    pub rps: f64,
    pub avg_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub buckets: Vec<u64>,
    #[serde(default)]
    pub overflow: u64,
    #[serde(default)]
    pub sum_ns: u64,
}

impl Default for OpStats {
    fn default() -> Self {
        OpStats::from_parts(&[0, 0, 0, 0], 0.0, HistogramSnapshot::default())
    }
}

impl OpStats {
    fn from_parts(counts: &[u64], rps: f64, hist: HistogramSnapshot) -> Self {
        OpStats {
            success: counts[0],
            not_found: counts[1],
            failure: counts[2],
            timeout: counts[3],
            rps,
            avg_us: hist.mean_us(),
            p50_us: hist.percentile_us(0.50),
            p95_us: hist.percentile_us(0.95),
            p99_us: hist.percentile_us(0.99),
            buckets: hist.buckets,
            overflow: hist.overflow,
            sum_ns: hist.sum_ns,
        }
    }

    pub fn total(&self) -> u64 {
        self.success + self.not_found + self.failure + self.timeout
    }

    pub fn count(&self, status: OpStatus) -> u64 {
        match status {
            OpStatus::Success => self.success,
            OpStatus::NotFound => self.not_found,
            OpStatus::Failure => self.failure,
            OpStatus::Timeout => self.timeout,
        }
    }

    pub fn histogram(&self) -> HistogramSnapshot {
        HistogramSnapshot {
            buckets: self.buckets.clone(),
            overflow: self.overflow,
            sum_ns: self.sum_ns,
        }
    }

    /// Sums counts and rates and recomputes percentiles from the merged
    /// bucket vectors.
    pub fn merge(parts: &[&OpStats]) -> Result<OpStats, String> {
        let mut hist = HistogramSnapshot::default();
        let mut counts = [0u64; 4];
        let mut rps = 0.0;
        for p in parts {
            hist.merge(&p.histogram())?;
            for (i, st) in OpStatus::ALL.iter().enumerate() {
                counts[i] += p.count(*st);
            }
            rps += p.rps;
        }
        Ok(OpStats::from_parts(&counts, rps, hist))
    }
}

/// Point-in-time statistics of one node (or a merged cluster).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StatsSnapshot {
    /// Unix milliseconds.
    #[serde(rename = "timestamp")]
    pub timestamp_ms: u64,
    pub read: OpStats,
    pub write: OpStats,
    #[serde(default)]
    pub cache_hits: u64,
    #[serde(default)]
    pub cache_misses: u64,
    pub cache_hit_ratio: Option<f64>,
    pub sla_violation_ratio: f64,
}

impl StatsSnapshot {
    pub fn op(&self, op: OpType) -> &OpStats {
        match op {
            OpType::Read => &self.read,
            OpType::Write => &self.write,
        }
    }

    pub fn total_ops(&self) -> u64 {
        self.read.total() + self.write.total()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn counts_reads() {
        let m = Metrics::new();
        for _ in 0..1000 {
            m.record(OpType::Read, OpStatus::Success, Duration::from_micros(50));
        }
        let s = m.snapshot();
        assert_eq!(s.read.success, 1000);
        assert_eq!(s.write.total(), 0);
    }

    #[test]
    fn overflow_latency() {
        let m = Metrics::new();
        m.record(OpType::Write, OpStatus::Success, Duration::from_secs(120));
        let s = m.snapshot();
        assert_eq!(s.write.overflow, 1);
        assert_eq!(s.write.histogram().total_count(), s.write.success);
    }

    #[test]
    fn concurrent_recording_is_exact() {
        let m = Arc::new(Metrics::new());
        let handles: Vec<_> = (0..16)
            .map(|w| {
                let m = m.clone();
                thread::spawn(move || {
                    for i in 0..62_500u64 {
                        let status = OpStatus::ALL[((i + w) % 4) as usize];
                        let op = if i % 2 == 0 { OpType::Read } else { OpType::Write };
                        m.record(op, status, Duration::from_micros(i % 1000 + 1));
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let s = m.snapshot();
        assert_eq!(s.total_ops(), 1_000_000);
    }

    #[test]
    fn empty_snapshot_is_zero() {
        let s = Metrics::new().snapshot();
        assert_eq!(s.total_ops(), 0);
        assert_eq!(s.read.p99_us, 0.0);
        assert_eq!(s.write.avg_us, 0.0);
        assert_eq!(s.cache_hit_ratio, None);
        assert_eq!(s.sla_violation_ratio, 0.0);
    }

    #[test]
    fn quiescent_snapshots_agree() {
        let m = Metrics::new();
        m.record(OpType::Read, OpStatus::NotFound, Duration::from_micros(9));
        let a = m.snapshot();
        let b = m.snapshot();
        // rps depends on wall time while uptime is under one rate window.
        let strip = |s: &OpStats| OpStats { rps: 0.0, ..s.clone() };
        assert_eq!(strip(&a.read), strip(&b.read));
        assert_eq!(strip(&a.write), strip(&b.write));
    }

    #[test]
    fn per_op_violation_ratio() {
        let m = Metrics::new();
        for ms in [5, 5, 15, 25] {
            m.record(OpType::Read, OpStatus::Success, Duration::from_millis(ms));
        }
        let policy = SlaPolicy {
            metric: SlaMetric::PerOp,
            threshold: Duration::from_millis(10),
            window_seconds: 30,
        };
        assert_eq!(m.sla_violation_ratio(&policy), 0.5);
    }

    #[test]
    fn percentile_policy_below_threshold() {
        let m = Metrics::new();
        for _ in 0..1000 {
            m.record(OpType::Read, OpStatus::Success, Duration::from_millis(1));
        }
        let policy = SlaPolicy {
            metric: SlaMetric::P99,
            threshold: Duration::from_millis(10),
            window_seconds: 5,
        };
        assert_eq!(m.sla_violation_ratio(&policy), 0.0);
        m.record(OpType::Read, OpStatus::Success, Duration::from_millis(50));
        for _ in 0..20 {
            m.record(OpType::Read, OpStatus::Success, Duration::from_millis(50));
        }
        assert_eq!(m.sla_violation_ratio(&policy), 1.0);
    }

    #[test]
    fn failures_count_as_violations() {
        let m = Metrics::new();
        m.record(OpType::Write, OpStatus::Failure, Duration::from_micros(1));
        m.record(OpType::Write, OpStatus::Success, Duration::from_micros(1));
        let policy = SlaPolicy {
            metric: SlaMetric::PerOp,
            threshold: Duration::from_millis(10),
            window_seconds: 5,
        };
        assert_eq!(m.sla_violation_ratio(&policy), 0.5);
    }

    #[test]
    fn empty_window_ratio_is_zero() {
        let m = Metrics::new();
        for metric in [SlaMetric::P99, SlaMetric::P95, SlaMetric::Avg, SlaMetric::PerOp] {
            let p = SlaPolicy { metric, ..SlaPolicy::default() };
            assert_eq!(m.sla_violation_ratio(&p), 0.0);
        }
    }

    #[test]
    fn reset_zeroes_and_is_idempotent() {
        let m = Metrics::new();
        m.record(OpType::Read, OpStatus::Success, Duration::from_millis(1));
        m.record_with_cache(OpType::Read, OpStatus::Success, Duration::from_millis(1), Some(true));
        m.reset();
        m.reset();
        let s = m.snapshot();
        assert_eq!(s.total_ops(), 0);
        assert_eq!(s.cache_hit_ratio, None);
    }

    #[test]
    fn reset_during_concurrent_recording() {
        let m = Arc::new(Metrics::new());
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let recorded_after = Arc::new(AtomicU64::new(0));
        let reset_done = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let workers: Vec<_> = (0..4)
            .map(|_| {
                let (m, stop, after, done) =
                    (m.clone(), stop.clone(), recorded_after.clone(), reset_done.clone());
                thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        let post = done.load(Ordering::SeqCst);
                        m.record(OpType::Read, OpStatus::Success, Duration::from_micros(3));
                        if post {
                            after.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                })
            })
            .collect();
        thread::sleep(Duration::from_millis(50));
        m.reset();
        reset_done.store(true, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(50));
        stop.store(true, Ordering::SeqCst);
        for w in workers {
            w.join().unwrap();
        }
        let counted = m.snapshot().read.success;
        let after = recorded_after.load(Ordering::SeqCst);
        // Records that started before the flag flipped may land on either side.
        assert!(counted >= after, "{counted} < {after}");
        assert!(counted <= after + 4, "{counted} > {after} + in-flight");
    }

    #[test]
    fn cache_ratio_and_percentiles_monotone() {
        let m = Metrics::new();
        for i in 0..100u64 {
            m.record_with_cache(
                OpType::Read,
                OpStatus::Success,
                Duration::from_micros(i * 37 + 1),
                Some(i % 4 != 0),
            );
        }
        let s = m.snapshot();
        assert_eq!(s.cache_hit_ratio, Some(0.75));
        assert!(s.read.p50_us <= s.read.p95_us && s.read.p95_us <= s.read.p99_us);
    }

    #[test]
    fn footprint_constant_in_sample_count() {
        let m = Metrics::new();
        for _ in 0..10 {
            m.record(OpType::Read, OpStatus::Success, Duration::from_micros(10));
        }
        let small = m.memory_footprint();
        for i in 0..2_000_000u64 {
            m.record(OpType::Write, OpStatus::Success, Duration::from_micros(i % 100_000));
        }
        assert_eq!(m.memory_footprint(), small);
    }

    #[test]
    fn snapshot_json_shape() {
        let m = Metrics::new();
        m.record(OpType::Read, OpStatus::NotFound, Duration::from_micros(10));
        let v = serde_json::to_value(m.snapshot()).unwrap();
        for key in ["timestamp", "read", "write", "cacheHitRatio", "slaViolationRatio"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let read = &v["read"];
        for key in ["success", "notFound", "failure", "timeout", "rps", "avg_us", "p50_us", "p95_us", "p99_us", "buckets"] {
            assert!(read.get(key).is_some(), "missing read.{key}");
        }
        assert_eq!(read["notFound"], 1);
        assert!(v["cacheHitRatio"].is_null());
    }
}
