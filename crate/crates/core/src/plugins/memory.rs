//! In-process key-value store with injectable latency, errors and a
//! throughput cliff. Serves as a system under test with known behavior.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use dashmap::DashMap;
use parking_lot::{Mutex, RwLock};
use rand::Rng;

use super::{op_timeout, OpResult, Plugin, PluginDescriptor, PluginError, OP_TIMEOUT_PROPERTY};
use crate::config::{PropertySet, PropertyValue, WatchId};

pub const PLUGIN_NAME: &str = "inmemory";

/// Injected behavior. Parameters (under `plugin.inmemory.`): `baseLatencyMs`,
/// `capacityCliff` (ops/s, 0 disables), `cliffLatencyMs`, `errorRate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultProfile {
    pub base_latency: Duration,
    pub capacity_cliff: Option<f64>,
    pub cliff_latency: Duration,
    pub error_rate: f64,
}

impl Default for FaultProfile {
    fn default() -> Self {
        FaultProfile {
            base_latency: Duration::ZERO,
            capacity_cliff: None,
            cliff_latency: Duration::ZERO,
            error_rate: 0.0,
        }
    }
}

impl FaultProfile {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(format!("errorRate {} outside [0, 1]", self.error_rate));
        }
        if self.capacity_cliff.is_some() && self.cliff_latency < self.base_latency {
            return Err("cliffLatencyMs must be at least baseLatencyMs".into());
        }
        Ok(())
    }

    /// Applies one `plugin.inmemory.*` parameter, keeping the profile
    /// unchanged if the result would be invalid. Unknown names are ignored.
    pub fn apply(&mut self, param: &str, raw: Option<&str>) -> Result<(), String> {
        let mut next = *self;
        next.set_param(param, raw)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    fn set_param(&mut self, param: &str, raw: Option<&str>) -> Result<(), String> {
        fn num(param: &str, raw: Option<&str>) -> Result<f64, String> {
            match raw {
                None => Ok(0.0),
                Some(r) => f64::parse_property(r)
                    .filter(|v| *v >= 0.0)
                    .ok_or_else(|| format!("{param}=`{r}` is not a nonnegative decimal")),
            }
        }
        match param {
            "baseLatencyMs" => self.base_latency = Duration::from_secs_f64(num(param, raw)? / 1e3),
            "cliffLatencyMs" => self.cliff_latency = Duration::from_secs_f64(num(param, raw)? / 1e3),
            "capacityCliff" => {
                let v = num(param, raw)?;
                self.capacity_cliff = (v > 0.0).then_some(v);
            }
            "errorRate" => self.error_rate = num(param, raw)?,
            _ => {}
        }
        Ok(())
    }

    fn from_descriptor(d: &PluginDescriptor) -> Result<Self, PluginError> {
        let mut p = FaultProfile::default();
        for (k, v) in &d.params {
            p.set_param(k, Some(v)).map_err(|message| PluginError::Config {
                plugin: d.name.clone(),
                message,
            })?;
        }
        p.validate().map_err(|message| PluginError::Config {
            plugin: d.name.clone(),
            message,
        })?;
        Ok(p)
    }
}

const RATE_SLOTS: usize = 100;
const RATE_SLOT: Duration = Duration::from_millis(10);

/// Operations seen over the trailing second, in 10 ms slots.
struct RateTracker {
    origin: Instant,
    slots: Mutex<([u64; RATE_SLOTS], [u64; RATE_SLOTS])>,
}

impl RateTracker {
    fn new() -> Self {
        RateTracker {
            origin: Instant::now(),
            slots: Mutex::new(([0; RATE_SLOTS], [u64::MAX; RATE_SLOTS])),
        }
    }

    /// Counts one arrival and returns arrivals within the last second.
    fn hit(&self, now: Instant) -> u64 {
        let tick = (now.saturating_duration_since(self.origin).as_nanos() / RATE_SLOT.as_nanos()) as u64;
        let mut guard = self.slots.lock();
        let (counts, ticks) = &mut *guard;
        let i = (tick % RATE_SLOTS as u64) as usize;
        if ticks[i] != tick {
            ticks[i] = tick;
            counts[i] = 0;
        }
        counts[i] += 1;
        counts
            .iter()
            .zip(ticks.iter())
            .filter(|(_, t)| **t <= tick && tick - **t < RATE_SLOTS as u64)
            .map(|(c, _)| *c)
            .sum()
    }
}

pub struct InMemoryStore {
    data: DashMap<String, Vec<u8>>,
    fault: Arc<RwLock<FaultProfile>>,
    timeout: Arc<RwLock<Duration>>,
    rate: RateTracker,
    closed: AtomicBool,
    props: Weak<PropertySet>,
    watches: Mutex<Vec<WatchId>>,
}

impl std::fmt::Debug for InMemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InMemoryStore")
            .field("len", &self.data.len())
            .field("fault", &*self.fault.read())
            .finish()
    }
}

impl InMemoryStore {
    pub fn new(fault: FaultProfile) -> Self {
        InMemoryStore {
            data: DashMap::new(),
            fault: Arc::new(RwLock::new(fault)),
            timeout: Arc::new(RwLock::new(super::DEFAULT_OP_TIMEOUT)),
            rate: RateTracker::new(),
            closed: AtomicBool::new(false),
            props: Weak::new(),
            watches: Mutex::new(Vec::new()),
        }
    }

    /// Builds a store whose fault profile and deadline follow the live
    /// properties.
    pub fn from_properties(
        descriptor: &PluginDescriptor,
        props: &Arc<PropertySet>,
    ) -> Result<Self, PluginError> {
        let mut store = Self::new(FaultProfile::from_descriptor(descriptor)?);
        *store.timeout.write() = op_timeout(props);
        store.props = Arc::downgrade(props);

        let fault = store.fault.clone();
        let prefix = PluginDescriptor::prefix(PLUGIN_NAME);
        let w1 = props.watch(format!("{prefix}*"), move |change| {
            let param = &change.name[prefix.len()..];
            if let Err(err) = fault.write().apply(param, change.new.as_deref()) {
                tracing::warn!(%err, "ignoring invalid fault parameter");
            }
        });
        let timeout = store.timeout.clone();
        let w2 = props.watch(OP_TIMEOUT_PROPERTY, move |change| {
            let ms = change.new.as_deref().and_then(f64::parse_property);
            *timeout.write() = match ms {
                Some(ms) if ms > 0.0 => Duration::from_secs_f64(ms / 1000.0),
                _ => super::DEFAULT_OP_TIMEOUT,
            };
        });
        store.watches.lock().extend([w1, w2]);
        Ok(store)
    }

    pub fn init(
        descriptor: &PluginDescriptor,
        props: &Arc<PropertySet>,
    ) -> Result<Arc<dyn Plugin>, PluginError> {
        Ok(Arc::new(Self::from_properties(descriptor, props)?))
    }

    pub fn fault_profile(&self) -> FaultProfile {
        *self.fault.read()
    }

    pub fn set_fault_profile(&self, fault: FaultProfile) {
        *self.fault.write() = fault;
    }

    pub fn set_timeout(&self, timeout: Duration) {
        *self.timeout.write() = timeout;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flips one bit of a stored value in place. Returns false when the key
    /// is absent or the index out of range.
    pub fn corrupt(&self, key: &str, byte: usize) -> bool {
        match self.data.get_mut(key) {
            Some(mut v) if byte < v.len() => {
                v[byte] ^= 0x01;
                true
            }
            _ => false,
        }
    }

    /// Applies injected latency and errors. `Err` carries the result to
    /// return instead of performing the operation.
    fn admit(&self, started: Instant) -> Result<(), OpResult> {
        if self.closed.load(Ordering::Acquire) {
            return Err(OpResult::shut_down(started));
        }
        let fault = *self.fault.read();
        let offered = self.rate.hit(started);
        let delay = match fault.capacity_cliff {
            Some(cliff) if offered as f64 > cliff => fault.cliff_latency,
            _ => fault.base_latency,
        };
        let deadline = *self.timeout.read();
        if delay > deadline {
            thread::sleep(deadline);
            return Err(OpResult::timeout(started.elapsed()));
        }
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        if fault.error_rate > 0.0 && rand::rng().random::<f64>() < fault.error_rate {
            return Err(OpResult::failure("injected fault", started.elapsed()));
        }
        if self.closed.load(Ordering::Acquire) {
            return Err(OpResult::shut_down(started));
        }
        Ok(())
    }
}

impl Plugin for InMemoryStore {
    fn name(&self) -> &str {
        PLUGIN_NAME
    }

    fn read(&self, key: &str) -> OpResult {
        let started = Instant::now();
        if let Err(r) = self.admit(started) {
            return r;
        }
        let value = self.data.get(key).map(|v| v.clone());
        match value {
            Some(v) => OpResult::found(v, started.elapsed()).checked(),
            None => OpResult::not_found(started.elapsed()),
        }
    }

    fn write(&self, key: &str, value: &[u8]) -> OpResult {
        let started = Instant::now();
        if let Err(r) = self.admit(started) {
            return r;
        }
        self.data.insert(key.to_string(), value.to_vec());
        OpResult::success(started.elapsed())
    }

    fn shutdown(&self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        if let Some(props) = self.props.upgrade() {
            for id in self.watches.lock().drain(..) {
                props.unwatch(id);
            }
        }
    }
}
