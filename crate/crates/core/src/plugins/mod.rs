//! Client-driver abstraction and the built-in drivers.
//!
//! A plugin owns the connection to a system under test and performs single
//! key reads and writes. Handles are shared by every worker of a node.

pub mod composite;
pub mod memory;
pub mod resp;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::config::PropertySet;
use crate::workload::verify_payload;

pub use crate::metrics::OpStatus;
pub use composite::{CompositePlugin, LruCachePlugin};
pub use memory::{FaultProfile, InMemoryStore};
pub use resp::{RespPlugin, RespServer};

/// Global per-operation deadline property, in milliseconds.
pub const OP_TIMEOUT_PROPERTY: &str = "opTimeoutMs";
pub const DEFAULT_OP_TIMEOUT: Duration = Duration::from_secs(5);

pub const SHUT_DOWN_DETAIL: &str = "plugin shut down";
pub const CORRUPTION_DETAIL: &str = "corruption";

#[derive(Debug, thiserror::Error)]
pub enum PluginError {
    #[error("unknown plugin `{name}`; available: {}", available.join(", "))]
    Unknown { name: String, available: Vec<String> },
    #[error("plugin `{0}` is already registered")]
    Duplicate(String),
    #[error("cannot reach {host}:{port}: {source}")]
    Unreachable {
        host: String,
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error("plugin `{plugin}` misconfigured: {message}")]
    Config { plugin: String, message: String },
}

/// Outcome of one read or write.
#[derive(Clone, PartialEq, Eq)]
pub struct OpResult {
    pub status: OpStatus,
    pub latency: Duration,
    pub value: Option<Vec<u8>>,
    pub detail: Option<String>,
    pub cache_hit: Option<bool>,
}

impl fmt::Debug for OpResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpResult")
            .field("status", &self.status)
            .field("latency", &self.latency)
            .field("value_len", &self.value.as_ref().map(Vec::len))
            .field("detail", &self.detail)
            .field("cache_hit", &self.cache_hit)
            .finish()
    }
}

impl OpResult {
    pub fn new(status: OpStatus, latency: Duration) -> Self {
        OpResult {
            status,
            latency,
            value: None,
            detail: None,
            cache_hit: None,
        }
    }

    pub fn success(latency: Duration) -> Self {
        Self::new(OpStatus::Success, latency)
    }

    pub fn found(value: Vec<u8>, latency: Duration) -> Self {
        OpResult {
            value: Some(value),
            ..Self::success(latency)
        }
    }

    pub fn not_found(latency: Duration) -> Self {
        Self::new(OpStatus::NotFound, latency)
    }

    pub fn failure(detail: impl Into<String>, latency: Duration) -> Self {
        OpResult {
            detail: Some(detail.into()),
            ..Self::new(OpStatus::Failure, latency)
        }
    }

    pub fn timeout(latency: Duration) -> Self {
        OpResult {
            detail: Some("deadline exceeded".into()),
            ..Self::new(OpStatus::Timeout, latency)
        }
    }

    pub fn shut_down(started: Instant) -> Self {
        Self::failure(SHUT_DOWN_DETAIL, started.elapsed())
    }

    pub fn is_success(&self) -> bool {
        self.status == OpStatus::Success
    }

    /// Turns a successful read whose payload fails its checksum into a
    /// corruption failure.
    pub fn checked(self) -> Self {
        match &self.value {
            Some(v) if self.status == OpStatus::Success && !verify_payload(v) => OpResult {
                value: None,
                detail: Some(CORRUPTION_DETAIL.into()),
                status: OpStatus::Failure,
                ..self
            },
            _ => self,
        }
    }
}

/// A driver for one system under test.
pub trait Plugin: Send + Sync {
    fn name(&self) -> &str;

    fn read(&self, key: &str) -> OpResult;

    fn write(&self, key: &str, value: &[u8]) -> OpResult;

    /// Closes connections. Idempotent; later operations fail with
    /// [`SHUT_DOWN_DETAIL`].
    fn shutdown(&self);

    /// Whether results carry `cache_hit`.
    fn has_cache(&self) -> bool {
        false
    }
}

/// Identity and connection settings for a plugin instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginDescriptor {
    pub name: String,
    pub hosts: Vec<(String, u16)>,
    /// The `plugin.<name>.*` namespace, prefix stripped.
    pub params: BTreeMap<String, String>,
}

impl PluginDescriptor {
    pub fn new(name: impl Into<String>) -> Self {
        PluginDescriptor {
            name: name.into(),
            hosts: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn with_hosts(mut self, hosts: Vec<(String, u16)>) -> Self {
        self.hosts = hosts;
        self
    }

    /// Fills `params` from the effective `plugin.<name>.*` properties.
    pub fn with_properties(mut self, props: &PropertySet) -> Self {
        self.params = props.namespace(&Self::prefix(&self.name));
        self
    }

    pub fn prefix(name: &str) -> String {
        format!("plugin.{name}.")
    }

    pub fn param<T: crate::config::PropertyValue>(&self, key: &str) -> Result<Option<T>, PluginError> {
        match self.params.get(key) {
            None => Ok(None),
            Some(raw) => T::parse_property(raw).map(Some).ok_or_else(|| PluginError::Config {
                plugin: self.name.clone(),
                message: format!("parameter `{key}`=`{raw}` is not a valid {}", T::TYPE_NAME),
            }),
        }
    }
}

/// Parses `host:port[,host:port...]`.
pub fn parse_hosts(list: &str) -> Result<Vec<(String, u16)>, String> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|hp| {
            let (host, port) = hp
                .rsplit_once(':')
                .ok_or_else(|| format!("`{hp}` is not host:port"))?;
            let port = port.parse().map_err(|_| format!("bad port in `{hp}`"))?;
            Ok((host.to_string(), port))
        })
        .collect()
}

pub(crate) fn op_timeout(props: &PropertySet) -> Duration {
    match props.get::<f64>(OP_TIMEOUT_PROPERTY) {
        Ok(Some(ms)) if ms > 0.0 => Duration::from_secs_f64(ms / 1000.0),
        _ => DEFAULT_OP_TIMEOUT,
    }
}

pub type Factory = Arc<
    dyn Fn(&PluginRegistry, &PluginDescriptor, &Arc<PropertySet>) -> Result<Arc<dyn Plugin>, PluginError>
        + Send
        + Sync,
>;

/// Name-keyed plugin constructors.
#[derive(Clone)]
pub struct PluginRegistry {
    factories: BTreeMap<String, Factory>,
}

impl fmt::Debug for PluginRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for PluginRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PluginRegistry {
    pub fn empty() -> Self {
        PluginRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// `inmemory`, `resp` and `composite`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(memory::PLUGIN_NAME, Arc::new(|_, d, p| memory::InMemoryStore::init(d, p)))
            .expect("fresh registry");
        r.register(resp::PLUGIN_NAME, Arc::new(|_, d, p| resp::RespPlugin::init(d, p)))
            .expect("fresh registry");
        r.register(composite::PLUGIN_NAME, Arc::new(composite::CompositePlugin::init))
            .expect("fresh registry");
        r
    }

    pub fn register(&mut self, name: &str, factory: Factory) -> Result<(), PluginError> {
        if self.factories.contains_key(name) {
            return Err(PluginError::Duplicate(name.to_string()));
        }
        self.factories.insert(name.to_string(), factory);
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn init(
        &self,
        descriptor: &PluginDescriptor,
        props: &Arc<PropertySet>,
    ) -> Result<Arc<dyn Plugin>, PluginError> {
        let factory = self.factories.get(&descriptor.name).ok_or_else(|| PluginError::Unknown {
            name: descriptor.name.clone(),
            available: self.names(),
        })?;
        factory(self, descriptor, props)
    }
}
