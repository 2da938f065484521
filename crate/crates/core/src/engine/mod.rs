//! Per-node load generator: reader and writer pools, backfill, and live
//! reconciliation against the workload properties.

pub mod limiter;

pub use limiter::{default_burst, TokenBucket};

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::config::{PropertySet, WatchId};
use crate::metrics::{Metrics, OpStatus, OpType};
use crate::plugins::Plugin;
use crate::workload::{self, generate_payload, key_name, KeyGenerator, WorkloadConfig, WorkloadError};

/// Upper bound on how long [`Engine::stop`] waits for workers to exit.
pub const QUIESCE_BOUND: Duration = Duration::from_secs(2);

const DISABLED_NAP: Duration = Duration::from_millis(20);

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("busy: {0}")]
    Busy(&'static str),
    #[error("invalid key range [{start}, {end}) for numKeys={num_keys}")]
    Range { start: u64, end: u64, num_keys: u64 },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Backfilling,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Reads,
    Writes,
    Both,
}

impl Which {
    fn ops(self) -> &'static [OpType] {
        match self {
            Which::Reads => &[OpType::Read],
            Which::Writes => &[OpType::Write],
            Which::Both => &[OpType::Read, OpType::Write],
        }
    }
}

impl FromStr for Which {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reads" => Ok(Which::Reads),
            "writes" => Ok(Which::Writes),
            "both" => Ok(Which::Both),
            other => Err(format!("which must be reads, writes or both, got `{other}`")),
        }
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Reads => "reads",
            Which::Writes => "writes",
            Which::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BackfillProgress {
    pub start: u64,
    pub end: u64,
    pub success: u64,
    pub failure: u64,
    pub done: bool,
    pub elapsed_ms: u64,
}

impl BackfillProgress {
    pub fn completed(&self) -> u64 {
        self.success + self.failure
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EngineStatus {
    pub phase: Phase,
    pub reads_running: bool,
    pub writes_running: bool,
    /// Workers currently allowed to issue (zero while the enabled flag is off).
    pub active_readers: usize,
    pub active_writers: usize,
    pub reader_ids: Vec<u64>,
    pub writer_ids: Vec<u64>,
    pub read_rate_limit: f64,
    pub write_rate_limit: f64,
    pub backfill: Option<BackfillProgress>,
    /// Why the most recent property change was not applied.
    pub config_error: Option<String>,
}

struct Shared {
    plugin: Arc<dyn Plugin>,
    metrics: Arc<Metrics>,
    config: RwLock<Arc<WorkloadConfig>>,
    generation: AtomicU64,
    buckets: [TokenBucket; 2],
    origin: Instant,
    base_seed: u64,
}

impl Shared {
    fn bucket(&self, op: OpType) -> &TokenBucket {
        &self.buckets[op_slot(op)]
    }
}

fn op_slot(op: OpType) -> usize {
    match op {
        OpType::Read => 0,
        OpType::Write => 1,
    }
}

struct Worker {
    id: u64,
    retire: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

#[derive(Default)]
struct Pool {
    running: bool,
    workers: Vec<Worker>,
    retiring: Vec<Worker>,
}

struct BackfillRun {
    start: u64,
    end: u64,
    success: AtomicU64,
    failure: AtomicU64,
    done: AtomicBool,
    started: Instant,
    finished: Mutex<Option<Duration>>,
}

impl BackfillRun {
    fn progress(&self) -> BackfillProgress {
        let elapsed = self.finished.lock().unwrap_or_else(|| self.started.elapsed());
        BackfillProgress {
            start: self.start,
            end: self.end,
            success: self.success.load(Ordering::Acquire),
            failure: self.failure.load(Ordering::Acquire),
            done: self.done.load(Ordering::Acquire),
            elapsed_ms: elapsed.as_millis() as u64,
        }
    }
}

struct Control {
    pools: [Pool; 2],
    next_worker_id: u64,
    backfill: Option<Arc<BackfillRun>>,
    config_error: Option<String>,
}

pub struct Engine {
    shared: Arc<Shared>,
    props: Arc<PropertySet>,
    control: Mutex<Control>,
    watch: Mutex<Option<WatchId>>,
}

impl Engine {
    /// Builds an idle engine from the current properties and subscribes it to
    /// workload property changes.
    pub fn new(
        plugin: Arc<dyn Plugin>,
        props: Arc<PropertySet>,
        metrics: Arc<Metrics>,
        base_seed: u64,
    ) -> Result<Arc<Engine>, EngineError> {
        let config = WorkloadConfig::from_properties(&props)?;
        let shared = Arc::new(Shared {
            plugin,
            metrics,
            buckets: [
                TokenBucket::new(config.read_rate_limit),
                TokenBucket::new(config.write_rate_limit),
            ],
            config: RwLock::new(Arc::new(config)),
            generation: AtomicU64::new(0),
            origin: Instant::now(),
            base_seed,
        });
        let engine = Arc::new(Engine {
            shared,
            props: props.clone(),
            control: Mutex::new(Control {
                pools: Default::default(),
                next_worker_id: 0,
                backfill: None,
                config_error: None,
            }),
            watch: Mutex::new(None),
        });
        let weak: Weak<Engine> = Arc::downgrade(&engine);
        let id = props.watch("*", move |change| {
            if !workload::keys::ALL.contains(&change.name.as_str()) {
                return;
            }
            if let Some(engine) = weak.upgrade() {
                if let Err(e) = engine.reconcile() {
                    tracing::warn!(property = %change.name, error = %e, "keeping prior workload config");
                }
            }
        });
        *engine.watch.lock() = Some(id);
        Ok(engine)
    }

    pub fn plugin(&self) -> &Arc<dyn Plugin> {
        &self.shared.plugin
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.shared.metrics
    }

    pub fn properties(&self) -> &Arc<PropertySet> {
        &self.props
    }

    pub fn config(&self) -> Arc<WorkloadConfig> {
        self.shared.config.read().clone()
    }

    pub fn limiter(&self, op: OpType) -> &TokenBucket {
        self.shared.bucket(op)
    }

    pub fn phase(&self) -> Phase {
        phase_of(&self.control.lock())
    }

    pub fn status(&self) -> EngineStatus {
        let c = self.control.lock();
        let cfg = self.config();
        let ids = |op: OpType| -> Vec<u64> {
            c.pools[op_slot(op)].workers.iter().map(|w| w.id).collect()
        };
        let reader_ids = ids(OpType::Read);
        let writer_ids = ids(OpType::Write);
        EngineStatus {
            phase: phase_of(&c),
            reads_running: c.pools[0].running,
            writes_running: c.pools[1].running,
            active_readers: if cfg.read_enabled { reader_ids.len() } else { 0 },
            active_writers: if cfg.write_enabled { writer_ids.len() } else { 0 },
            reader_ids,
            writer_ids,
            read_rate_limit: self.shared.bucket(OpType::Read).rate(),
            write_rate_limit: self.shared.bucket(OpType::Write).rate(),
            backfill: c.backfill.as_ref().map(|b| b.progress()),
            config_error: c.config_error.clone(),
        }
    }

    /// Re-reads the workload properties. An invalid config is rejected and
    /// the prior one stays in force.
    pub fn reconcile(&self) -> Result<(), EngineError> {
        let mut c = self.control.lock();
        let next = match WorkloadConfig::from_properties(&self.props) {
            Ok(cfg) => cfg,
            Err(e) => {
                c.config_error = Some(e.to_string());
                return Err(e.into());
            }
        };
        c.config_error = None;
        let changed = {
            let mut current = self.shared.config.write();
            if **current != next {
                *current = Arc::new(next.clone());
                true
            } else {
                false
            }
        };
        if changed {
            self.shared.generation.fetch_add(1, Ordering::AcqRel);
            self.shared.bucket(OpType::Read).set_rate(next.read_rate_limit);
            self.shared.bucket(OpType::Write).set_rate(next.write_rate_limit);
        }
        self.resize_pools(&mut c, &next);
        Ok(())
    }

    pub fn start(&self, which: Which) -> Result<(), EngineError> {
        let mut c = self.control.lock();
        if backfill_active(&c) {
            return Err(EngineError::Busy("backfill in progress"));
        }
        for op in which.ops() {
            c.pools[op_slot(*op)].running = true;
        }
        let cfg = self.config();
        self.resize_pools(&mut c, &cfg);
        Ok(())
    }

    /// Stops the targeted pools and waits up to [`QUIESCE_BOUND`] for their
    /// workers to finish the operation in hand. Idempotent.
    pub fn stop(&self, which: Which) {
        let retiring: Vec<Worker> = {
            let mut c = self.control.lock();
            for op in which.ops() {
                c.pools[op_slot(*op)].running = false;
            }
            let cfg = self.config();
            self.resize_pools(&mut c, &cfg);
            which
                .ops()
                .iter()
                .flat_map(|op| std::mem::take(&mut c.pools[op_slot(*op)].retiring))
                .collect()
        };
        let deadline = Instant::now() + QUIESCE_BOUND;
        for w in retiring {
            while !w.handle.is_finished() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(5));
            }
            if w.handle.is_finished() {
                let _ = w.handle.join();
            } else {
                tracing::warn!(worker = w.id, "worker still in an operation after quiesce bound");
            }
        }
    }

    /// Launches a background backfill writing each key in `[start, end)`
    /// once, with `numWriters` parallel writers.
    pub fn backfill(&self, start: u64, end: u64) -> Result<(), EngineError> {
        let mut c = self.control.lock();
        if backfill_active(&c) {
            return Err(EngineError::Busy("backfill in progress"));
        }
        if c.pools.iter().any(|p| p.running) {
            return Err(EngineError::Busy("workload running"));
        }
        let cfg = self.config();
        if start >= end || end > cfg.num_keys {
            return Err(EngineError::Range {
                start,
                end,
                num_keys: cfg.num_keys,
            });
        }
        let run = Arc::new(BackfillRun {
            start,
            end,
            success: AtomicU64::new(0),
            failure: AtomicU64::new(0),
            done: AtomicBool::new(false),
            started: Instant::now(),
            finished: Mutex::new(None),
        });
        c.backfill = Some(run.clone());
        let shared = self.shared.clone();
        thread::Builder::new()
            .name("backfill".into())
            .spawn(move || run_backfill(shared, cfg, run))
            .expect("spawn backfill thread");
        Ok(())
    }

    pub fn backfill_progress(&self) -> Option<BackfillProgress> {
        self.control.lock().backfill.as_ref().map(|b| b.progress())
    }

    /// Waits for the current backfill to finish.
    pub fn wait_backfill(&self, timeout: Duration) -> Option<BackfillProgress> {
        let deadline = Instant::now() + timeout;
        loop {
            let p = self.backfill_progress()?;
            if p.done {
                return Some(p);
            }
            if Instant::now() >= deadline {
                return None;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Stops all workers and detaches from the property set.
    pub fn shutdown(&self) {
        if let Some(id) = self.watch.lock().take() {
            self.props.unwatch(id);
        }
        self.stop(Which::Both);
    }

    fn resize_pools(&self, c: &mut Control, cfg: &WorkloadConfig) {
        for (op, target) in [
            (OpType::Read, cfg.num_readers),
            (OpType::Write, cfg.num_writers),
        ] {
            let slot = op_slot(op);
            let running = c.pools[slot].running;
            let target = if running { target } else { 0 };
            c.pools[slot].retiring.retain(|w| !w.handle.is_finished());
            while c.pools[slot].workers.len() > target {
                let w = c.pools[slot].workers.pop().expect("nonempty pool");
                w.retire.store(true, Ordering::Release);
                c.pools[slot].retiring.push(w);
            }
            while c.pools[slot].workers.len() < target {
                let id = c.next_worker_id;
                c.next_worker_id += 1;
                let worker = spawn_worker(self.shared.clone(), op, id);
                c.pools[slot].workers.push(worker);
            }
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        let c = self.control.get_mut();
        for pool in &c.pools {
            for w in pool.workers.iter().chain(&pool.retiring) {
                w.retire.store(true, Ordering::Release);
            }
        }
    }
}

fn phase_of(c: &Control) -> Phase {
    if backfill_active(c) {
        Phase::Backfilling
    } else if c.pools.iter().any(|p| p.running) {
        Phase::Running
    } else {
        Phase::Idle
    }
}

fn backfill_active(c: &Control) -> bool {
    c.backfill
        .as_ref()
        .is_some_and(|b| !b.done.load(Ordering::Acquire))
}

/// Seed for worker `id` under config generation `generation`.
pub fn worker_seed(base_seed: u64, id: u64, generation: u64) -> u64 {
    base_seed
        .wrapping_add(id)
        .wrapping_add(generation.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn same_keyspace(a: &WorkloadConfig, b: &WorkloadConfig) -> bool {
    a.num_keys == b.num_keys
        && a.num_values == b.num_values
        && a.data_size == b.data_size
        && a.user_variable_data_size == b.user_variable_data_size
        && a.distribution == b.distribution
}

fn spawn_worker(shared: Arc<Shared>, op: OpType, id: u64) -> Worker {
    let retire = Arc::new(AtomicBool::new(false));
    let flag = retire.clone();
    let name = match op {
        OpType::Read => format!("reader-{id}"),
        OpType::Write => format!("writer-{id}"),
    };
    let handle = thread::Builder::new()
        .name(name)
        .spawn(move || run_worker(&shared, op, id, &flag))
        .expect("spawn worker thread");
    Worker { id, retire, handle }
}

fn run_worker(shared: &Shared, op: OpType, id: u64, retire: &AtomicBool) {
    let mut generation = shared.generation.load(Ordering::Acquire);
    let mut cfg = shared.config.read().clone();
    let mut keys = KeyGenerator::new(&cfg, worker_seed(shared.base_seed, id, generation), shared.origin);
    while !retire.load(Ordering::Acquire) {
        let g = shared.generation.load(Ordering::Acquire);
        if g != generation {
            let next = shared.config.read().clone();
            if !same_keyspace(&cfg, &next) {
                keys = KeyGenerator::new(&next, worker_seed(shared.base_seed, id, g), shared.origin);
            }
            cfg = next;
            generation = g;
        }
        let enabled = match op {
            OpType::Read => cfg.read_enabled,
            OpType::Write => cfg.write_enabled,
        };
        if !enabled {
            thread::sleep(DISABLED_NAP);
            continue;
        }
        if !shared.bucket(op).acquire(retire) {
            break;
        }
        let key = keys.next_key(Instant::now());
        let result = match op {
            OpType::Read => shared.plugin.read(&key),
            OpType::Write => {
                let value = keys.next_payload(&cfg);
                shared.plugin.write(&key, &value)
            }
        };
        shared
            .metrics
            .record_with_cache(op, result.status, result.latency, result.cache_hit);
    }
}

fn run_backfill(shared: Arc<Shared>, cfg: Arc<WorkloadConfig>, run: Arc<BackfillRun>) {
    let next = AtomicU64::new(run.start);
    let parallelism = cfg.num_writers.max(1);
    thread::scope(|s| {
        for _ in 0..parallelism {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::AcqRel);
                if i >= run.end {
                    break;
                }
                let value = generate_payload(i % cfg.num_values, &cfg, shared.base_seed ^ i);
                let r = shared.plugin.write(&key_name(i), &value);
                if r.status == OpStatus::Success {
                    run.success.fetch_add(1, Ordering::AcqRel);
                } else {
                    run.failure.fetch_add(1, Ordering::AcqRel);
                }
            });
        }
    });
    *run.finished.lock() = Some(run.started.elapsed());
    run.done.store(true, Ordering::Release);
}
