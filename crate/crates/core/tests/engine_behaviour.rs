use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use flexbench::config::PropertySet;
use flexbench::engine::{Engine, Which};
use flexbench::metrics::{Metrics, OpStatus};
use flexbench::plugins::{FaultProfile, InMemoryStore, OpResult, Plugin};
use flexbench::workload::{key_index, Distribution, KeyGenerator, WindowInner, WorkloadConfig};

fn props(entries: &[(&str, &str)]) -> Arc<PropertySet> {
    let p = Arc::new(PropertySet::new());
    for (k, v) in entries {
        p.set_property(*k, v);
    }
    p
}

fn wait_for(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(20));
    }
    f()
}

#[test]
fn reader_pool_resizes_from_property_change() {
    let p = props(&[("numReaders", "4"), ("writeEnabled", "false"), ("readRateLimit", "200")]);
    let store = Arc::new(InMemoryStore::new(FaultProfile::default()));
    let engine = Engine::new(store, p.clone(), Arc::new(Metrics::new()), 1).unwrap();
    engine.start(Which::Reads).unwrap();
    assert!(wait_for(Duration::from_secs(2), || engine.status().active_readers == 4));
    let before = engine.status().reader_ids;

    p.set_property("numReaders", "8");
    assert!(wait_for(Duration::from_secs(5), || engine.status().active_readers == 8));
    let grown = engine.status().reader_ids;
    assert!(before.iter().all(|id| grown.contains(id)), "{before:?} -> {grown:?}");

    p.set_property("numReaders", "2");
    assert!(wait_for(Duration::from_secs(5), || engine.status().active_readers == 2));
    let shrunk = engine.status().reader_ids;
    assert_eq!(shrunk, grown[..2].to_vec(), "newest workers retire first");
    engine.shutdown();
}

/// The first thread to read stalls on every operation and reports timeouts.
struct Sticky {
    inner: InMemoryStore,
    victim: Mutex<Option<thread::ThreadId>>,
}

impl Plugin for Sticky {
    fn name(&self) -> &str {
        "sticky"
    }
    fn read(&self, key: &str) -> OpResult {
        let me = thread::current().id();
        if *self.victim.lock().get_or_insert(me) == me {
            thread::sleep(Duration::from_millis(400));
            return OpResult::timeout(Duration::from_millis(400));
        }
        self.inner.read(key)
    }
    fn write(&self, key: &str, value: &[u8]) -> OpResult {
        self.inner.write(key, value)
    }
    fn shutdown(&self) {}
}

#[test]
fn stalled_worker_does_not_block_others() {
    let p = props(&[("numReaders", "4"), ("writeEnabled", "false"), ("readRateLimit", "400")]);
    let plugin = Arc::new(Sticky {
        inner: InMemoryStore::new(FaultProfile::default()),
        victim: Mutex::new(None),
    });
    let metrics = Arc::new(Metrics::new());
    let engine = Engine::new(plugin, p, metrics.clone(), 5).unwrap();
    engine.start(Which::Reads).unwrap();
    thread::sleep(Duration::from_secs(3));
    engine.stop(Which::Both);
    let s = metrics.snapshot();
    assert!((5..=9).contains(&s.read.timeout), "{}", s.read.timeout);
    // The stalled worker holds at most one token at a time, so the rest
    // keep close to the full rate.
    let answered = s.read.count(OpStatus::NotFound) + s.read.success;
    assert!(answered >= 1100, "{answered} answered in 3s at 400/s");
}

#[test]
fn writes_tag_keys_within_key_space() {
    #[derive(Default)]
    struct Keys(Mutex<Vec<String>>);
    impl Plugin for Keys {
        fn name(&self) -> &str {
            "keys"
        }
        fn read(&self, _: &str) -> OpResult {
            OpResult::not_found(Duration::ZERO)
        }
        fn write(&self, key: &str, _: &[u8]) -> OpResult {
            self.0.lock().push(key.to_string());
            OpResult::success(Duration::ZERO)
        }
        fn shutdown(&self) {}
    }
    let plugin = Arc::new(Keys::default());
    let p = props(&[("numKeys", "37"), ("readEnabled", "false"), ("writeRateLimit", "300")]);
    let engine = Engine::new(plugin.clone(), p, Arc::new(Metrics::new()), 2).unwrap();
    engine.start(Which::Writes).unwrap();
    thread::sleep(Duration::from_millis(800));
    engine.stop(Which::Both);
    let keys = plugin.0.lock();
    assert!(keys.len() > 100);
    assert!(keys.iter().all(|k| key_index(k).is_some_and(|i| i < 37)));
}

#[test]
fn sliding_window_is_uniform_within_window() {
    const SIZE: u64 = 50;
    const DRAWS: usize = 200_000;
    let cfg = WorkloadConfig {
        num_keys: 1000,
        distribution: Distribution::SlidingWindow {
            inner: WindowInner::Uniform,
            size: SIZE,
            advance_interval: Duration::from_secs(3600),
        },
        ..WorkloadConfig::default()
    };
    let now = Instant::now();
    let mut gen = KeyGenerator::new(&cfg, 77, now);
    gen.set_window_offset(980);
    let mut counts = vec![0u64; SIZE as usize];
    for _ in 0..DRAWS {
        let i = gen.next_index(now);
        let rel = (i + 1000 - 980) % 1000;
        assert!(rel < SIZE, "{i} outside window");
        counts[rel as usize] += 1;
    }
    let e = DRAWS as f64 / SIZE as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new((SIZE - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.001, "chi2 {stat} p {p}");
}
