//! Fixed-size log-bucketed latency histogram.
//!
//! Bucket 0 holds latencies up to 1 µs; bucket `i` holds `(G^(i-1), G^i]` µs
//! with `G = 1.04`, up to the first bound at or above 60 s. Anything above
//! that is counted as overflow.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const GROWTH: f64 = 1.04;
pub const MAX_TRACKABLE_US: f64 = 60_000_000.0;

fn ln_growth() -> f64 {
    GROWTH.ln()
}

/// Number of buckets, including the sub-microsecond bucket 0.
pub fn bucket_count() -> usize {
    static COUNT: OnceLock<usize> = OnceLock::new();
    *COUNT.get_or_init(|| (MAX_TRACKABLE_US.ln() / ln_growth()).ceil() as usize + 1)
}

fn bounds() -> &'static [f64] {
    static BOUNDS: OnceLock<Vec<f64>> = OnceLock::new();
    BOUNDS.get_or_init(|| (0..bucket_count()).map(|i| GROWTH.powi(i as i32)).collect())
}

/// Inclusive upper bound of bucket `i`, in microseconds.
pub fn upper_bound_us(i: usize) -> f64 {
    bounds()[i]
}

/// Exclusive lower bound of bucket `i`, in microseconds.
pub fn lower_bound_us(i: usize) -> f64 {
    if i == 0 {
        0.0
    } else {
        bounds()[i - 1]
    }
}

/// Bucket for a latency in microseconds; `None` means overflow.
pub fn bucket_index(us: f64) -> Option<usize> {
    if us <= 1.0 {
        return Some(0);
    }
    if us > MAX_TRACKABLE_US {
        return None;
    }
    let b = bounds();
    let mut i = (us.ln() / ln_growth()).ceil() as usize;
    // Float error may land one bucket off near a boundary.
    if i < b.len() && us > b[i] {
        i += 1;
    }
    while i > 1 && us <= b[i - 1] {
        i -= 1;
    }
    (i < b.len()).then_some(i)
}

fn duration_us(latency: Duration) -> f64 {
    latency.as_nanos() as f64 / 1000.0
}

/// Concurrent histogram. Memory is fixed at construction.
pub struct LatencyHistogram {
    buckets: Box<[AtomicU64]>,
    overflow: AtomicU64,
    sum_ns: AtomicU64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl LatencyHistogram {
    pub fn new() -> Self {
        LatencyHistogram {
            buckets: (0..bucket_count()).map(|_| AtomicU64::new(0)).collect(),
            overflow: AtomicU64::new(0),
            sum_ns: AtomicU64::new(0),
        }
    }

    pub fn record(&self, latency: Duration) {
        match bucket_index(duration_us(latency)) {
            Some(i) => {
                self.buckets[i].fetch_add(1, Ordering::Relaxed);
                let ns = u64::try_from(latency.as_nanos()).unwrap_or(u64::MAX);
                self.sum_ns.fetch_add(ns, Ordering::Relaxed);
            }
            None => {
                self.overflow.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Heap + inline bytes held by this histogram.
    pub fn memory_footprint(&self) -> usize {
        std::mem::size_of::<Self>() + self.buckets.len() * std::mem::size_of::<AtomicU64>()
    }

    pub fn snapshot(&self) -> HistogramSnapshot {
        HistogramSnapshot {
            buckets: self.buckets.iter().map(|b| b.load(Ordering::Relaxed)).collect(),
            overflow: self.overflow.load(Ordering::Relaxed),
            sum_ns: self.sum_ns.load(Ordering::Relaxed),
        }
    }
}

/// Plain copy of a histogram, mergeable across nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramSnapshot {
    pub buckets: Vec<u64>,
    pub overflow: u64,
    /// Sum of in-range latencies, for the mean.
    pub sum_ns: u64,
}

impl Default for HistogramSnapshot {
    fn default() -> Self {
        HistogramSnapshot {
            buckets: vec![0; bucket_count()],
            overflow: 0,
            sum_ns: 0,
        }
    }
}

impl HistogramSnapshot {
    pub fn record(&mut self, latency: Duration) {
        match bucket_index(duration_us(latency)) {
            Some(i) => {
                self.buckets[i] += 1;
                self.sum_ns = self
                    .sum_ns
                    .saturating_add(u64::try_from(latency.as_nanos()).unwrap_or(u64::MAX));
            }
            None => self.overflow += 1,
        }
    }

    pub fn total_count(&self) -> u64 {
        self.buckets.iter().sum::<u64>() + self.overflow
    }

    pub fn is_empty(&self) -> bool {
        self.total_count() == 0
    }

    /// Upper bound of the bucket where the cumulative count first reaches
    /// `ceil(q * total)`. Zero when empty; the max bound when the rank falls
    /// into overflow.
    pub fn percentile_us(&self, q: f64) -> f64 {
        let total = self.total_count();
        if total == 0 {
            return 0.0;
        }
        let rank = ((q.clamp(0.0, 1.0) * total as f64).ceil() as u64).max(1);
        let mut cumulative = 0u64;
        for (i, count) in self.buckets.iter().enumerate() {
            cumulative += count;
            if cumulative >= rank {
                return upper_bound_us(i);
            }
        }
        upper_bound_us(self.buckets.len() - 1)
    }

    /// Mean of in-range samples in microseconds.
    pub fn mean_us(&self) -> f64 {
        let n: u64 = self.buckets.iter().sum();
        if n == 0 {
            0.0
        } else {
            self.sum_ns as f64 / 1000.0 / n as f64
        }
    }

    /// Samples strictly above `threshold`, counting only buckets lying
    /// entirely above it (plus overflow).
    pub fn count_above(&self, threshold: Duration) -> u64 {
        let t = duration_us(threshold);
        let above: u64 = self
            .buckets
            .iter()
            .enumerate()
            .filter(|(i, _)| lower_bound_us(*i) >= t)
            .map(|(_, c)| c)
            .sum();
        above + self.overflow
    }

    /// Adds another snapshot's counts. Vectors of a different length (from a
    /// differently configured peer) are rejected.
    pub fn merge(&mut self, other: &HistogramSnapshot) -> Result<(), String> {
        if other.buckets.len() != self.buckets.len() {
            return Err(format!(
                "bucket vector length {} does not match {}",
                other.buckets.len(),
                self.buckets.len()
            ));
        }
        for (a, b) in self.buckets.iter_mut().zip(&other.buckets) {
            *a += b;
        }
        self.overflow += other.overflow;
        self.sum_ns = self.sum_ns.saturating_add(other.sum_ns);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.buckets.iter_mut().for_each(|b| *b = 0);
        self.overflow = 0;
        self.sum_ns = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exact_percentile(sorted: &[f64], q: f64) -> f64 {
        let rank = ((q * sorted.len() as f64).ceil() as usize).max(1);
        sorted[rank - 1]
    }

    #[test]
    fn bucket_layout_covers_range_at_four_percent() {
        let n = bucket_count();
        assert!(upper_bound_us(n - 1) >= MAX_TRACKABLE_US);
        assert!(upper_bound_us(n - 2) < MAX_TRACKABLE_US);
        for i in 2..n {
            let width = upper_bound_us(i) / lower_bound_us(i) - 1.0;
            assert!(width <= 0.05, "bucket {i} width {width}");
        }
    }

    #[test]
    fn index_respects_bounds() {
        for i in 1..bucket_count() - 1 {
            let hi = upper_bound_us(i);
            assert_eq!(bucket_index(hi), Some(i));
            if hi * 1.0001 <= MAX_TRACKABLE_US {
                assert_eq!(bucket_index(hi * 1.0001), Some(i + 1));
            }
        }
        assert_eq!(bucket_index(0.0), Some(0));
        assert_eq!(bucket_index(1.0), Some(0));
        assert_eq!(bucket_index(MAX_TRACKABLE_US * 1.2), None);
    }

    #[test]
    fn overflow_keeps_totals_consistent() {
        let h = LatencyHistogram::new();
        h.record(Duration::from_secs(120));
        h.record(Duration::from_millis(3));
        let s = h.snapshot();
        assert_eq!(s.overflow, 1);
        assert_eq!(s.total_count(), 2);
        assert_eq!(s.buckets.iter().sum::<u64>() + s.overflow, s.total_count());
    }

    #[test]
    fn p50_of_one_to_hundred_ms() {
        let mut s = HistogramSnapshot::default();
        for ms in 1..=100u64 {
            s.record(Duration::from_millis(ms));
        }
        let p50 = s.percentile_us(0.5);
        assert!((50_000.0..=50_000.0 * 1.05).contains(&p50), "{p50}");
    }

    #[test]
    fn empty_reports_zero() {
        let s = HistogramSnapshot::default();
        assert_eq!(s.percentile_us(0.99), 0.0);
        assert_eq!(s.mean_us(), 0.0);
        assert_eq!(s.total_count(), 0);
    }

    #[test]
    fn footprint_is_independent_of_samples() {
        let h = LatencyHistogram::new();
        let before = h.memory_footprint();
        for i in 0..10_000_000u64 {
            h.record(Duration::from_micros(i % 5_000_000 + 1));
        }
        assert_eq!(h.memory_footprint(), before);
        assert_eq!(h.snapshot().total_count(), 10_000_000);
    }

    #[test]
    fn count_above_threshold() {
        let mut s = HistogramSnapshot::default();
        for ms in [5, 5, 15, 25] {
            s.record(Duration::from_millis(ms));
        }
        assert_eq!(s.count_above(Duration::from_millis(10)), 2);
    }

    proptest! {
        #[test]
        fn percentiles_within_one_bucket_of_sorted_oracle(
            samples in proptest::collection::vec(1.0f64..60_000_000.0, 1..2000)
        ) {
            let mut s = HistogramSnapshot::default();
            for us in &samples {
                s.record(Duration::from_nanos((us * 1000.0) as u64));
            }
            let mut sorted: Vec<f64> = samples.iter().map(|us| (us * 1000.0).floor() / 1000.0).collect();
            sorted.sort_by(f64::total_cmp);
            let mut last = 0.0;
            for q in [0.5, 0.95, 0.99] {
                let exact = exact_percentile(&sorted, q);
                let got = s.percentile_us(q);
                prop_assert!(got >= exact * (1.0 - 1e-9));
                prop_assert!(got <= exact * 1.05, "q={} got={} exact={}", q, got, exact);
                prop_assert!(got >= last);
                last = got;
            }
        }

        #[test]
        fn merged_snapshots_equal_concatenated_samples(
            a in proptest::collection::vec(1u64..10_000_000, 0..300),
            b in proptest::collection::vec(1u64..10_000_000, 0..300),
        ) {
            let mut ha = HistogramSnapshot::default();
            let mut hb = HistogramSnapshot::default();
            let mut hab = HistogramSnapshot::default();
            for us in &a { ha.record(Duration::from_micros(*us)); hab.record(Duration::from_micros(*us)); }
            for us in &b { hb.record(Duration::from_micros(*us)); hab.record(Duration::from_micros(*us)); }
            ha.merge(&hb).unwrap();
            prop_assert_eq!(ha, hab);
        }
    }
}
