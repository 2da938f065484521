//! Cache-aside composite: a cache driver in front of a backing driver, with
//! routing switchable at runtime through `plugin.composite.useCache`.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::time::Instant;

use lru::LruCache;
use parking_lot::Mutex;

use super::{OpResult, Plugin, PluginDescriptor, PluginError, PluginRegistry};
use crate::config::{PropertySet, PropertyValue, WatchId};
use crate::metrics::OpStatus;

pub const PLUGIN_NAME: &str = "composite";
pub const USE_CACHE_PROPERTY: &str = "plugin.composite.useCache";
pub const CACHE_CAPACITY_PROPERTY: &str = "plugin.composite.cacheCapacity";
pub const BACKING_PROPERTY: &str = "plugin.composite.backing";
pub const DEFAULT_CACHE_CAPACITY: usize = 1000;

/// Entry-bounded LRU cache exposed as a plugin.
pub struct LruCachePlugin {
    entries: Mutex<LruCache<String, Vec<u8>>>,
    closed: AtomicBool,
}

impl LruCachePlugin {
    pub fn new(capacity: usize) -> Self {
        LruCachePlugin {
            entries: Mutex::new(LruCache::new(NonZeroUsize::new(capacity.max(1)).unwrap())),
            closed: AtomicBool::new(false),
        }
    }

    pub fn capacity(&self) -> usize {
        self.entries.lock().cap().get()
    }

    pub fn resize(&self, capacity: usize) {
        self.entries
            .lock()
            .resize(NonZeroUsize::new(capacity.max(1)).unwrap());
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Plugin for LruCachePlugin {
    fn name(&self) -> &str {
        "lru"
    }

    fn read(&self, key: &str) -> OpResult {
        let started = Instant::now();
        if self.closed.load(Ordering::Acquire) {
            return OpResult::shut_down(started);
        }
        let hit = self.entries.lock().get(key).cloned();
        match hit {
            Some(v) => OpResult::found(v, started.elapsed()).checked(),
            None => OpResult::not_found(started.elapsed()),
        }
    }

    fn write(&self, key: &str, value: &[u8]) -> OpResult {
        let started = Instant::now();
        if self.closed.load(Ordering::Acquire) {
            return OpResult::shut_down(started);
        }
        self.entries.lock().put(key.to_string(), value.to_vec());
        OpResult::success(started.elapsed())
    }

    fn shutdown(&self) {
        self.closed.store(true, Ordering::Release);
        self.entries.lock().clear();
    }
}

pub struct CompositePlugin {
    cache: Arc<dyn Plugin>,
    backing: Arc<dyn Plugin>,
    use_cache: Arc<AtomicBool>,
    closed: AtomicBool,
    props: Weak<PropertySet>,
    watches: Mutex<Vec<WatchId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Cached,
    Direct,
}

impl CompositePlugin {
    pub fn new(cache: Arc<dyn Plugin>, backing: Arc<dyn Plugin>, use_cache: bool) -> Self {
        CompositePlugin {
            cache,
            backing,
            use_cache: Arc::new(AtomicBool::new(use_cache)),
            closed: AtomicBool::new(false),
            props: Weak::new(),
            watches: Mutex::new(Vec::new()),
        }
    }

    /// Registry constructor. The backing driver (default `inmemory`) is built
    /// through the same registry with this descriptor's hosts; the cache is an
    /// [`LruCachePlugin`] sized by `cacheCapacity`.
    pub fn init(
        registry: &PluginRegistry,
        descriptor: &PluginDescriptor,
        props: &Arc<PropertySet>,
    ) -> Result<Arc<dyn Plugin>, PluginError> {
        let config_err = |message: String| PluginError::Config {
            plugin: PLUGIN_NAME.into(),
            message,
        };
        let backing_name = descriptor
            .param::<String>("backing")?
            .unwrap_or_else(|| super::memory::PLUGIN_NAME.to_string());
        if backing_name == PLUGIN_NAME {
            return Err(config_err("backing driver cannot itself be composite".into()));
        }
        let capacity = descriptor
            .param::<usize>("cacheCapacity")?
            .unwrap_or(DEFAULT_CACHE_CAPACITY);
        if capacity == 0 {
            return Err(config_err("cacheCapacity must be at least 1".into()));
        }
        let use_cache = descriptor.param::<bool>("useCache")?.unwrap_or(true);

        let backing_desc = PluginDescriptor::new(backing_name)
            .with_hosts(descriptor.hosts.clone())
            .with_properties(props);
        let backing = registry.init(&backing_desc, props)?;
        let cache = Arc::new(LruCachePlugin::new(capacity));

        let mut plugin = CompositePlugin::new(cache.clone(), backing, use_cache);
        plugin.props = Arc::downgrade(props);
        let flag = plugin.use_cache.clone();
        let w1 = props.watch(USE_CACHE_PROPERTY, move |change| {
            match change.new.as_deref().map(bool::parse_property) {
                Some(Some(v)) => flag.store(v, Ordering::Release),
                None => flag.store(true, Ordering::Release),
                Some(None) => tracing::warn!(value = ?change.new, "ignoring non-boolean useCache"),
            }
        });
        let w2 = props.watch(CACHE_CAPACITY_PROPERTY, move |change| {
            match change.new.as_deref().and_then(usize::parse_property) {
                Some(n) if n > 0 => cache.resize(n),
                None if change.new.is_none() => cache.resize(DEFAULT_CACHE_CAPACITY),
                _ => tracing::warn!(value = ?change.new, "ignoring invalid cacheCapacity"),
            }
        });
        plugin.watches.lock().extend([w1, w2]);
        Ok(Arc::new(plugin))
    }

    pub fn route(&self) -> Route {
        if self.use_cache.load(Ordering::Acquire) {
            Route::Cached
        } else {
            Route::Direct
        }
    }

    pub fn set_use_cache(&self, enabled: bool) {
        self.use_cache.store(enabled, Ordering::Release);
    }

    fn cached_read(&self, key: &str, started: Instant) -> OpResult {
        let from_cache = self.cache.read(key);
        let degraded = match from_cache.status {
            OpStatus::Success => {
                return OpResult {
                    latency: started.elapsed(),
                    cache_hit: Some(true),
                    ..from_cache
                }
            }
            OpStatus::NotFound => None,
            _ => Some(format!(
                "cache failure: {}",
                from_cache.detail.as_deref().unwrap_or("unknown")
            )),
        };
        let backing = self.backing.read(key);
        if degraded.is_none() && backing.is_success() {
            if let Some(v) = &backing.value {
                // A failed fill only costs a future miss.
                let _ = self.cache.write(key, v);
            }
        }
        OpResult {
            latency: started.elapsed(),
            cache_hit: Some(false),
            detail: match (degraded, backing.detail) {
                (Some(d), Some(b)) => Some(format!("{d}; {b}")),
                (d, b) => d.or(b),
            },
            ..backing
        }
    }

    fn cached_write(&self, key: &str, value: &[u8], started: Instant) -> OpResult {
        let backing = self.backing.write(key, value);
        if !backing.is_success() {
            return OpResult {
                latency: started.elapsed(),
                ..backing
            };
        }
        let cache = self.cache.write(key, value);
        let detail = (!cache.is_success()).then(|| {
            format!("cache failure: {}", cache.detail.as_deref().unwrap_or("unknown"))
        });
        OpResult {
            latency: started.elapsed(),
            detail,
            ..backing
        }
    }
}

impl Plugin for CompositePlugin {
    fn name(&self) -> &str {
        PLUGIN_NAME
    }

    fn read(&self, key: &str) -> OpResult {
        let started = Instant::now();
        if self.closed.load(Ordering::Acquire) {
            return OpResult::shut_down(started);
        }
        match self.route() {
            Route::Cached => self.cached_read(key, started),
            Route::Direct => self.backing.read(key),
        }
    }

    fn write(&self, key: &str, value: &[u8]) -> OpResult {
        let started = Instant::now();
        if self.closed.load(Ordering::Acquire) {
            return OpResult::shut_down(started);
        }
        match self.route() {
            Route::Cached => self.cached_write(key, value, started),
            Route::Direct => self.backing.write(key, value),
        }
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
        self.cache.shutdown();
        self.backing.shutdown();
    }

    fn has_cache(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plugins::memory::{FaultProfile, InMemoryStore};
    use crate::workload::payload_with_len;

    fn composite(use_cache: bool) -> (CompositePlugin, Arc<InMemoryStore>) {
        let backing = Arc::new(InMemoryStore::new(FaultProfile::default()));
        let c = CompositePlugin::new(Arc::new(LruCachePlugin::new(10)), backing.clone(), use_cache);
        (c, backing)
    }

    #[test]
    fn direct_route_has_no_cache_flag() {
        let (c, _) = composite(false);
        assert!(c.write("key-1", b"abc").cache_hit.is_none());
        let r = c.read("key-1");
        assert!(r.cache_hit.is_none());
        assert_eq!(r.value.as_deref(), Some(&b"abc"[..]));
        assert!(c.read("key-2").cache_hit.is_none());
    }

    #[test]
    fn second_read_hits() {
        let (c, backing) = composite(true);
        backing.write("key-1", &payload_with_len(1, 40));
        let first = c.read("key-1");
        assert_eq!(first.cache_hit, Some(false));
        let second = c.read("key-1");
        assert_eq!(second.cache_hit, Some(true));
        assert_eq!(first.value, second.value);
    }

    #[test]
    fn write_through_populates_both() {
        let (c, backing) = composite(true);
        assert!(c.write("key-3", b"v").is_success());
        assert_eq!(backing.read("key-3").value.as_deref(), Some(&b"v"[..]));
        assert_eq!(c.read("key-3").cache_hit, Some(true));
    }

    #[test]
    fn miss_on_absent_key_does_not_fill() {
        let (c, _) = composite(true);
        let r = c.read("key-404");
        assert_eq!(r.status, OpStatus::NotFound);
        assert_eq!(r.cache_hit, Some(false));
        assert_eq!(c.read("key-404").cache_hit, Some(false));
    }

    #[test]
    fn lru_evicts_oldest() {
        let (c, backing) = composite(true);
        for i in 0..11 {
            backing.write(&format!("key-{i}"), b"x");
            c.read(&format!("key-{i}"));
        }
        assert_eq!(c.read("key-0").cache_hit, Some(false));
        assert_eq!(c.read("key-10").cache_hit, Some(true));
    }

    #[test]
    fn cache_failure_degrades_to_direct() {
        let failing_cache = Arc::new(InMemoryStore::new(FaultProfile {
            error_rate: 1.0,
            ..FaultProfile::default()
        }));
        let backing = Arc::new(InMemoryStore::new(FaultProfile::default()));
        backing.write("key-1", b"v");
        let c = CompositePlugin::new(failing_cache, backing, true);
        let r = c.read("key-1");
        assert!(r.is_success());
        assert_eq!(r.cache_hit, Some(false));
        assert!(r.detail.unwrap().contains("cache failure"));
    }

    #[test]
    fn backing_failure_propagates() {
        let backing = Arc::new(InMemoryStore::new(FaultProfile {
            error_rate: 1.0,
            ..FaultProfile::default()
        }));
        let c = CompositePlugin::new(Arc::new(LruCachePlugin::new(4)), backing, true);
        assert_eq!(c.write("k", b"v").status, OpStatus::Failure);
        assert_eq!(c.read("k").status, OpStatus::Failure);
    }

    #[test]
    fn toggle_through_properties() {
        let props = Arc::new(PropertySet::new());
        props.set_property(CACHE_CAPACITY_PROPERTY, "5");
        let d = PluginDescriptor::new(PLUGIN_NAME).with_properties(&props);
        let plugin = PluginRegistry::builtin().init(&d, &props).unwrap();
        assert!(plugin.has_cache());
        plugin.write("key-1", b"v");
        assert_eq!(plugin.read("key-1").cache_hit, Some(true));
        props.set_property(USE_CACHE_PROPERTY, "false");
        assert_eq!(plugin.read("key-1").cache_hit, None);
        props.set_property(USE_CACHE_PROPERTY, "true");
        assert_eq!(plugin.read("key-1").cache_hit, Some(true));
        plugin.shutdown();
        plugin.shutdown();
    }

    #[test]
    fn composite_backing_cannot_nest() {
        let props = Arc::new(PropertySet::new());
        props.set_property(BACKING_PROPERTY, "composite");
        let d = PluginDescriptor::new(PLUGIN_NAME).with_properties(&props);
        assert!(PluginRegistry::builtin().init(&d, &props).is_err());
    }

    mod equivalence {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Read(u8),
            Write(u8, u8),
        }

        proptest! {
            // With the cache off, the composite is observably the backing store.
            #[test]
            fn direct_mode_matches_backing(ops in proptest::collection::vec(
                prop_oneof![
                    (0u8..8).prop_map(Op::Read),
                    (0u8..8, any::<u8>()).prop_map(|(k, v)| Op::Write(k, v)),
                ],
                1..60,
            )) {
                let (c, _) = composite(false);
                let reference = InMemoryStore::new(FaultProfile::default());
                for op in ops {
                    let (a, b) = match op {
                        Op::Read(k) => {
                            let key = format!("key-{k}");
                            (c.read(&key), reference.read(&key))
                        }
                        Op::Write(k, v) => {
                            let key = format!("key-{k}");
                            (c.write(&key, &[v]), reference.write(&key, &[v]))
                        }
                    };
                    prop_assert_eq!(a.status, b.status);
                    prop_assert_eq!(a.value, b.value);
                    prop_assert_eq!(a.cache_hit, None);
                }
            }
        }
    }
}
