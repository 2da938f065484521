//! Workload parameters, key selection and payload synthesis.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, PropertySet, PropertyValue};

/// Property names read by [`WorkloadConfig::from_map`].
pub mod keys {
    pub const NUM_KEYS: &str = "numKeys";
    pub const NUM_VALUES: &str = "numValues";
    pub const DATA_SIZE: &str = "dataSize";
    pub const NUM_WRITERS: &str = "numWriters";
    pub const NUM_READERS: &str = "numReaders";
    pub const WRITE_ENABLED: &str = "writeEnabled";
    pub const READ_ENABLED: &str = "readEnabled";
    pub const WRITE_RATE_LIMIT: &str = "writeRateLimit";
    pub const READ_RATE_LIMIT: &str = "readRateLimit";
    pub const USER_VARIABLE_DATA_SIZE: &str = "userVariableDataSize";
    pub const DISTRIBUTION: &str = "distribution";
    pub const ZIPFIAN_EXPONENT: &str = "zipfian.exponent";
    pub const WINDOW_INNER: &str = "slidingWindow.inner";
    pub const WINDOW_SIZE: &str = "slidingWindow.size";
    pub const WINDOW_ADVANCE_SECONDS: &str = "slidingWindow.advanceSeconds";

    pub const ALL: [&str; 15] = [
        NUM_KEYS,
        NUM_VALUES,
        DATA_SIZE,
        NUM_WRITERS,
        NUM_READERS,
        WRITE_ENABLED,
        READ_ENABLED,
        WRITE_RATE_LIMIT,
        READ_RATE_LIMIT,
        USER_VARIABLE_DATA_SIZE,
        DISTRIBUTION,
        ZIPFIAN_EXPONENT,
        WINDOW_INNER,
        WINDOW_SIZE,
        WINDOW_ADVANCE_SECONDS,
    ];
}

pub const DEFAULT_ZIPFIAN_EXPONENT: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid workload: {0}")]
    Invalid(String),
}

/// Key-selection distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Uniform,
    Zipfian { exponent: f64 },
    SlidingWindow {
        inner: WindowInner,
        size: u64,
        advance_interval: Duration,
    },
}

/// Distributions allowed inside a sliding window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowInner {
    Uniform,
    Zipfian { exponent: f64 },
}

impl WindowInner {
    fn name(self) -> &'static str {
        match self {
            WindowInner::Uniform => "uniform",
            WindowInner::Zipfian { .. } => "zipfian",
        }
    }
}

impl Distribution {
    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::Zipfian { .. } => "zipfian",
            Distribution::SlidingWindow { .. } => "sliding_window",
        }
    }
}

/// Per-node benchmark parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub num_keys: u64,
    pub num_values: u64,
    pub data_size: usize,
    pub num_writers: usize,
    pub num_readers: usize,
    pub write_enabled: bool,
    pub read_enabled: bool,
    pub write_rate_limit: f64,
    pub read_rate_limit: f64,
    pub user_variable_data_size: bool,
    pub distribution: Distribution,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            num_keys: 1000,
            num_values: 100,
            data_size: 128,
            num_writers: 1,
            num_readers: 1,
            write_enabled: true,
            read_enabled: true,
            write_rate_limit: 100.0,
            read_rate_limit: 100.0,
            user_variable_data_size: false,
            distribution: Distribution::Uniform,
        }
    }
}

fn lookup<T: PropertyValue>(
    map: &BTreeMap<String, String>,
    name: &str,
    fallback: T,
) -> Result<T, ConfigError> {
    match map.get(name) {
        None => Ok(fallback),
        Some(raw) => T::parse_property(raw).ok_or_else(|| ConfigError::Type {
            name: name.to_string(),
            value: raw.clone(),
            expected: T::TYPE_NAME,
        }),
    }
}

impl WorkloadConfig {
    pub fn from_properties(props: &PropertySet) -> Result<Self, WorkloadError> {
        Self::from_map(&props.effective_map())
    }

    /// Builds a config from effective property values, using defaults for
    /// anything absent, and validates it.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, WorkloadError> {
        let d = WorkloadConfig::default();
        let exponent = lookup(map, keys::ZIPFIAN_EXPONENT, DEFAULT_ZIPFIAN_EXPONENT)?;
        let distribution = match lookup(map, keys::DISTRIBUTION, "uniform".to_string())?.as_str() {
            "uniform" => Distribution::Uniform,
            "zipfian" => Distribution::Zipfian { exponent },
            "sliding_window" => {
                let inner = match lookup(map, keys::WINDOW_INNER, "uniform".to_string())?.as_str() {
                    "uniform" => WindowInner::Uniform,
                    "zipfian" => WindowInner::Zipfian { exponent },
                    other => {
                        return Err(WorkloadError::Invalid(format!(
                            "unknown sliding window inner distribution `{other}`"
                        )))
                    }
                };
                let size = lookup::<u64>(map, keys::WINDOW_SIZE, 0)?;
                let secs = lookup::<f64>(map, keys::WINDOW_ADVANCE_SECONDS, 30.0)?;
                if !(secs > 0.0) {
                    return Err(WorkloadError::Invalid(format!(
                        "{} must be positive",
                        keys::WINDOW_ADVANCE_SECONDS
                    )));
                }
                Distribution::SlidingWindow {
                    inner,
                    size,
                    advance_interval: Duration::from_secs_f64(secs),
                }
            }
            other => {
                return Err(WorkloadError::Invalid(format!("unknown distribution `{other}`")))
            }
        };
        let cfg = WorkloadConfig {
            num_keys: lookup(map, keys::NUM_KEYS, d.num_keys)?,
            num_values: lookup(map, keys::NUM_VALUES, d.num_values)?,
            data_size: lookup(map, keys::DATA_SIZE, d.data_size)?,
            num_writers: lookup(map, keys::NUM_WRITERS, d.num_writers)?,
            num_readers: lookup(map, keys::NUM_READERS, d.num_readers)?,
            write_enabled: lookup(map, keys::WRITE_ENABLED, d.write_enabled)?,
            read_enabled: lookup(map, keys::READ_ENABLED, d.read_enabled)?,
            write_rate_limit: lookup(map, keys::WRITE_RATE_LIMIT, d.write_rate_limit)?,
            read_rate_limit: lookup(map, keys::READ_RATE_LIMIT, d.read_rate_limit)?,
            user_variable_data_size: lookup(
                map,
                keys::USER_VARIABLE_DATA_SIZE,
                d.user_variable_data_size,
            )?,
            distribution,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |msg: String| Err(WorkloadError::Invalid(msg));
        if self.num_keys == 0 {
            return bad(format!("{} must be at least 1", keys::NUM_KEYS));
        }
        if self.num_values == 0 {
            return bad(format!("{} must be at least 1", keys::NUM_VALUES));
        }
        if self.data_size == 0 {
            return bad(format!("{} must be at least 1", keys::DATA_SIZE));
        }
        for (name, rate) in [
            (keys::WRITE_RATE_LIMIT, self.write_rate_limit),
            (keys::READ_RATE_LIMIT, self.read_rate_limit),
        ] {
            if !(rate >= 0.0) || !rate.is_finite() {
                return bad(format!("{name} must be a nonnegative number"));
            }
        }
        let check_exponent = |e: f64| {
            if e > 0.0 && e.is_finite() {
                Ok(())
            } else {
                bad(format!("{} must be positive", keys::ZIPFIAN_EXPONENT))
            }
        };
        match &self.distribution {
            Distribution::Uniform => {}
            Distribution::Zipfian { exponent } => check_exponent(*exponent)?,
            Distribution::SlidingWindow {
                inner,
                size,
                advance_interval,
            } => {
                if let WindowInner::Zipfian { exponent } = inner {
                    check_exponent(*exponent)?;
                }
                if *size == 0 || *size > self.num_keys {
                    return bad(format!(
                        "{} must be in [1, {}], got {size}",
                        keys::WINDOW_SIZE,
                        self.num_keys
                    ));
                }
                if advance_interval.is_zero() {
                    return bad(format!("{} must be positive", keys::WINDOW_ADVANCE_SECONDS));
                }
            }
        }
        Ok(())
    }

    /// The effective properties describing this config; feeding them back
    /// through [`WorkloadConfig::from_map`] yields an equal config.
    pub fn to_properties(&self) -> Vec<(String, String)> {
        let mut out = vec![
            (keys::NUM_KEYS, self.num_keys.to_string()),
            (keys::NUM_VALUES, self.num_values.to_string()),
            (keys::DATA_SIZE, self.data_size.to_string()),
            (keys::NUM_WRITERS, self.num_writers.to_string()),
            (keys::NUM_READERS, self.num_readers.to_string()),
            (keys::WRITE_ENABLED, self.write_enabled.to_string()),
            (keys::READ_ENABLED, self.read_enabled.to_string()),
            (keys::WRITE_RATE_LIMIT, self.write_rate_limit.to_string()),
            (keys::READ_RATE_LIMIT, self.read_rate_limit.to_string()),
            (keys::USER_VARIABLE_DATA_SIZE, self.user_variable_data_size.to_string()),
            (keys::DISTRIBUTION, self.distribution.name().to_string()),
        ];
        match &self.distribution {
            Distribution::Uniform => {}
            Distribution::Zipfian { exponent } => {
                out.push((keys::ZIPFIAN_EXPONENT, exponent.to_string()));
            }
            Distribution::SlidingWindow {
                inner,
                size,
                advance_interval,
            } => {
                out.push((keys::WINDOW_INNER, inner.name().to_string()));
                if let WindowInner::Zipfian { exponent } = inner {
                    out.push((keys::ZIPFIAN_EXPONENT, exponent.to_string()));
                }
                out.push((keys::WINDOW_SIZE, size.to_string()));
                out.push((
                    keys::WINDOW_ADVANCE_SECONDS,
                    advance_interval.as_secs_f64().to_string(),
                ));
            }
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Extension point for additional key distributions.
pub trait IndexSampler: Send {
    /// Draws an index in `[0, n)`, where `n` is the size the sampler was
    /// built for.
    fn sample(&mut self, rng: &mut dyn RngCore) -> u64;
}

pub struct UniformSampler {
    n: u64,
}

impl UniformSampler {
    pub fn new(n: u64) -> Self {
        assert!(n >= 1);
        UniformSampler { n }
    }
}

impl IndexSampler for UniformSampler {
    fn sample(&mut self, rng: &mut dyn RngCore) -> u64 {
        rng.random_range(0..self.n)
    }
}

/// Zipf sampler over ranks `1..=n` using rejection-inversion, so setup cost
/// does not depend on `n`. Rank `r` is returned as index `r - 1`.
pub struct ZipfSampler {
    n: f64,
    exponent: f64,
    h_integral_x1: f64,
    h_integral_n: f64,
    squeeze: f64,
}

impl ZipfSampler {
    pub fn new(n: u64, exponent: f64) -> Self {
        assert!(n >= 1 && exponent > 0.0);
        let mut z = ZipfSampler {
            n: n as f64,
            exponent,
            h_integral_x1: 0.0,
            h_integral_n: 0.0,
            squeeze: 0.0,
        };
        z.h_integral_x1 = z.h_integral(1.5) - 1.0;
        z.h_integral_n = z.h_integral(z.n + 0.5);
        z.squeeze = 2.0 - z.h_integral_inverse(z.h_integral(2.5) - z.h(2.0));
        z
    }

    fn h(&self, x: f64) -> f64 {
        (-self.exponent * x.ln()).exp()
    }

    // Antiderivative of h: (x^(1-s) - 1) / (1-s), continuous in s at 1.
    fn h_integral(&self, x: f64) -> f64 {
        let log_x = x.ln();
        expm1_over_x((1.0 - self.exponent) * log_x) * log_x
    }

    fn h_integral_inverse(&self, x: f64) -> f64 {
        let mut t = x * (1.0 - self.exponent);
        if t < -1.0 {
            t = -1.0;
        }
        (log1p_over_x(t) * x).exp()
    }

    pub fn sample_rank(&self, rng: &mut dyn RngCore) -> u64 {
        loop {
            let u01: f64 = rng.random();
            let u = self.h_integral_n + u01 * (self.h_integral_x1 - self.h_integral_n);
            let x = self.h_integral_inverse(u);
            let k = (x + 0.5).floor().clamp(1.0, self.n);
            if k - x <= self.squeeze || u >= self.h_integral(k + 0.5) - self.h(k) {
                return k as u64;
            }
        }
    }
}

impl IndexSampler for ZipfSampler {
    fn sample(&mut self, rng: &mut dyn RngCore) -> u64 {
        self.sample_rank(rng) - 1
    }
}

fn expm1_over_x(x: f64) -> f64 {
    if x.abs() > 1e-8 {
        x.exp_m1() / x
    } else {
        1.0 + x * 0.5 * (1.0 + x / 3.0 * (1.0 + 0.25 * x))
    }
}

fn log1p_over_x(x: f64) -> f64 {
    if x.abs() > 1e-8 {
        x.ln_1p() / x
    } else {
        1.0 - x * (0.5 - x * (1.0 / 3.0 - 0.25 * x))
    }
}

#[derive(Debug, Clone)]
struct WindowState {
    size: u64,
    interval: Duration,
    offset: u64,
    last_advance: Instant,
}

/// Formats a key index the way every plugin sees it.
pub fn key_name(index: u64) -> String {
    format!("key-{index}")
}

/// Parses `key-<n>` back to its index.
pub fn key_index(key: &str) -> Option<u64> {
    key.strip_prefix("key-")?.parse().ok()
}

/// Seeded, single-owner key and value-index generator.
pub struct KeyGenerator {
    num_keys: u64,
    num_values: u64,
    rng: ChaCha8Rng,
    sampler: Box<dyn IndexSampler>,
    window: Option<WindowState>,
}

impl KeyGenerator {
    /// `origin` anchors the sliding-window schedule; generators sharing an
    /// origin advance their windows in lockstep.
    pub fn new(config: &WorkloadConfig, seed: u64, origin: Instant) -> Self {
        let (sampler, window): (Box<dyn IndexSampler>, _) = match &config.distribution {
            Distribution::Uniform => (Box::new(UniformSampler::new(config.num_keys)), None),
            Distribution::Zipfian { exponent } => {
                (Box::new(ZipfSampler::new(config.num_keys, *exponent)), None)
            }
            Distribution::SlidingWindow {
                inner,
                size,
                advance_interval,
            } => {
                let sampler: Box<dyn IndexSampler> = match inner {
                    WindowInner::Uniform => Box::new(UniformSampler::new(*size)),
                    WindowInner::Zipfian { exponent } => Box::new(ZipfSampler::new(*size, *exponent)),
                };
                let window = WindowState {
                    size: *size,
                    interval: *advance_interval,
                    offset: 0,
                    last_advance: origin,
                };
                (sampler, Some(window))
            }
        };
        KeyGenerator {
            num_keys: config.num_keys,
            num_values: config.num_values,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sampler,
            window,
        }
    }

    /// A generator drawing indices in `[0, numKeys)` from a caller-provided
    /// sampler.
    pub fn with_sampler(config: &WorkloadConfig, seed: u64, sampler: Box<dyn IndexSampler>) -> Self {
        KeyGenerator {
            num_keys: config.num_keys,
            num_values: config.num_values,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sampler,
            window: None,
        }
    }

    pub fn window_offset(&self) -> Option<u64> {
        self.window.as_ref().map(|w| w.offset)
    }

    pub fn set_window_offset(&mut self, offset: u64) {
        if let Some(w) = self.window.as_mut() {
            w.offset = offset % self.num_keys;
        }
    }

    /// Applies any window hops due by `now`.
    pub fn advance_window(&mut self, now: Instant) {
        let num_keys = self.num_keys;
        if let Some(w) = self.window.as_mut() {
            let elapsed = now.saturating_duration_since(w.last_advance);
            let hops = (elapsed.as_nanos() / w.interval.as_nanos()) as u64;
            if hops > 0 {
                let step = ((hops as u128 * w.size as u128) % num_keys as u128) as u64;
                w.offset = ((w.offset as u128 + step as u128) % num_keys as u128) as u64;
                w.last_advance += w.interval * hops as u32;
            }
        }
    }

    pub fn next_index(&mut self, now: Instant) -> u64 {
        self.advance_window(now);
        let drawn = self.sampler.sample(&mut self.rng);
        match &self.window {
            Some(w) => (w.offset + drawn) % self.num_keys,
            None => drawn,
        }
    }

    pub fn next_key(&mut self, now: Instant) -> String {
        key_name(self.next_index(now))
    }

    pub fn next_value_index(&mut self) -> u64 {
        self.rng.random_range(0..self.num_values)
    }

    /// Draws a value index and synthesizes its payload.
    pub fn next_payload(&mut self, config: &WorkloadConfig) -> Vec<u8> {
        let index = self.next_value_index();
        let seed = self.rng.next_u64();
        generate_payload(index, config, seed)
    }
}

/// Bytes of checksum header at the start of payloads of at least this size.
pub const PAYLOAD_HEADER_LEN: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(FNV_PRIME))
}

/// Builds a payload for `value_index`. Length is `dataSize`, or uniform in
/// `[1, dataSize]` (drawn from `rng_seed`) when variable sizes are enabled.
/// Payloads of at least [`PAYLOAD_HEADER_LEN`] bytes start with the
/// little-endian FNV-1a checksum of the remaining bytes.
pub fn generate_payload(value_index: u64, config: &WorkloadConfig, rng_seed: u64) -> Vec<u8> {
    let len = if config.user_variable_data_size {
        ChaCha8Rng::seed_from_u64(rng_seed).random_range(1..=config.data_size)
    } else {
        config.data_size
    };
    payload_with_len(value_index, len)
}

/// The deterministic payload for `(value_index, len)`.
pub fn payload_with_len(value_index: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        value_index.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (len as u64).rotate_left(32),
    );
    let mut out = vec![0u8; len];
    if len < PAYLOAD_HEADER_LEN {
        rng.fill_bytes(&mut out);
        return out;
    }
    let (header, body) = out.split_at_mut(PAYLOAD_HEADER_LEN);
    rng.fill_bytes(body);
    header.copy_from_slice(&fnv1a64(body).to_le_bytes());
    out
}

/// Checks the checksum header. Payloads shorter than the header carry none
/// and always pass.
pub fn verify_payload(payload: &[u8]) -> bool {
    if payload.len() < PAYLOAD_HEADER_LEN {
        return true;
    }
    let (header, body) = payload.split_at(PAYLOAD_HEADER_LEN);
    header == fnv1a64(body).to_le_bytes()
}
