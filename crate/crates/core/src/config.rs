//! Layered dynamic properties.
//!
//! A [`PropertySet`] holds three layers (defaults, file, runtime overrides).
//! Lookups resolve to the value in the highest layer that defines a name.
//! Watchers registered with [`PropertySet::watch`] are invoked once for every
//! change of an *effective* value; writes shadowed by a higher layer are
//! silent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};

/// Default seconds between checks of the backing properties file.
pub const DEFAULT_POLL_INTERVAL_SECS: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to load properties file {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("property `{name}` has value `{value}` which is not a valid {expected}")]
    Type {
        name: String,
        value: String,
        expected: &'static str,
    },
}

/// Layer precedence. Higher wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Defaults = 0,
    File = 1,
    Runtime = 2,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Defaults, Layer::File, Layer::Runtime];

    pub fn precedence(self) -> u8 {
        self as u8
    }
}

/// One layer of raw `name -> value` entries. Values are kept as strings and
/// interpreted by the typed accessors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyLayer {
    pub layer: Layer,
    pub entries: BTreeMap<String, String>,
}

impl PropertyLayer {
    pub fn new(layer: Layer) -> Self {
        PropertyLayer {
            layer,
            entries: BTreeMap::new(),
        }
    }
}

/// A value type that can be read from a property.
pub trait PropertyValue: Sized {
    const TYPE_NAME: &'static str;
    fn parse_property(raw: &str) -> Option<Self>;
}

macro_rules! int_property {
    ($($t:ty),*) => {$(
        impl PropertyValue for $t {
            const TYPE_NAME: &'static str = "integer";
            fn parse_property(raw: &str) -> Option<Self> {
                raw.trim().parse().ok()
            }
        }
    )*};
}
int_property!(i32, i64, u32, u64, usize);

impl PropertyValue for f64 {
    const TYPE_NAME: &'static str = "decimal";
    fn parse_property(raw: &str) -> Option<Self> {
        raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
    }
}

impl PropertyValue for bool {
    const TYPE_NAME: &'static str = "boolean";
    fn parse_property(raw: &str) -> Option<Self> {
        match raw.trim() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
}

impl PropertyValue for String {
    const TYPE_NAME: &'static str = "string";
    fn parse_property(raw: &str) -> Option<Self> {
        Some(raw.to_string())
    }
}

impl PropertyValue for Vec<String> {
    const TYPE_NAME: &'static str = "string list";
    fn parse_property(raw: &str) -> Option<Self> {
        Some(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
        )
    }
}

/// A change of an effective value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyChange {
    pub name: String,
    pub old: Option<String>,
    pub new: Option<String>,
}

type Sink = Box<dyn Fn(&PropertyChange) + Send + Sync>;

struct Watcher {
    id: u64,
    pattern: String,
    sink: Sink,
}

impl Watcher {
    fn matches(&self, name: &str) -> bool {
        match self.pattern.strip_suffix('*') {
            Some(prefix) => name.starts_with(prefix),
            None => self.pattern == name,
        }
    }
}

/// Handle returned by [`PropertySet::watch`]; pass it to
/// [`PropertySet::unwatch`] to stop notifications.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatchId(u64);

type Layers = [Arc<BTreeMap<String, String>>; 3];

pub struct PropertySet {
    layers: RwLock<Layers>,
    // Serializes mutation + delivery so every watcher sees changes in order.
    mutation: Mutex<()>,
    watchers: RwLock<Vec<Arc<Watcher>>>,
    next_watch_id: Mutex<u64>,
    file_path: Mutex<Option<PathBuf>>,
    poll_interval: Duration,
}

impl fmt::Debug for PropertySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PropertySet")
            .field("effective", &self.effective_map())
            .field("poll_interval", &self.poll_interval)
            .finish()
    }
}

impl Default for PropertySet {
    fn default() -> Self {
        Self::new()
    }
}

impl PropertySet {
    pub fn new() -> Self {
        Self::with_poll_interval(Duration::from_secs(DEFAULT_POLL_INTERVAL_SECS))
    }

    pub fn with_poll_interval(poll_interval: Duration) -> Self {
        assert!(!poll_interval.is_zero(), "poll interval must be positive");
        PropertySet {
            layers: RwLock::new(Default::default()),
            mutation: Mutex::new(()),
            watchers: RwLock::new(Vec::new()),
            next_watch_id: Mutex::new(0),
            file_path: Mutex::new(None),
            poll_interval,
        }
    }

    pub fn poll_interval(&self) -> Duration {
        self.poll_interval
    }

    /// Seeds the defaults layer. Notifies watchers like any other mutation.
    pub fn set_default(&self, name: impl Into<String>, value: impl ToString) {
        self.mutate_one(Layer::Defaults, name.into(), Some(value.to_string()));
    }

    /// Sets a runtime override. Watchers of `name` have been notified by the
    /// time this returns, if the effective value changed.
    pub fn set_property(&self, name: impl Into<String>, value: impl ToString) {
        let name = name.into();
        assert!(!name.is_empty(), "property name must be nonempty");
        self.mutate_one(Layer::Runtime, name, Some(value.to_string()));
    }

    /// Removes a runtime override, exposing lower layers again.
    pub fn clear_property(&self, name: &str) {
        self.mutate_one(Layer::Runtime, name.to_string(), None);
    }

    fn mutate_one(&self, layer: Layer, name: String, value: Option<String>) {
        let _serial = self.mutation.lock();
        let change = {
            let mut layers = self.layers.write();
            let old = resolve(&layers, &name).map(str::to_owned);
            let map = Arc::make_mut(&mut layers[layer as usize]);
            match &value {
                Some(v) => {
                    map.insert(name.clone(), v.clone());
                }
                None => {
                    map.remove(&name);
                }
            }
            let new = resolve(&layers, &name).map(str::to_owned);
            (old != new).then_some(PropertyChange { name, old, new })
        };
        if let Some(change) = change {
            self.deliver(std::slice::from_ref(&change));
        }
    }

    /// Replaces the whole file layer in one step.
    pub fn replace_file_layer(&self, entries: BTreeMap<String, String>) {
        let _serial = self.mutation.lock();
        let changes = {
            let mut layers = self.layers.write();
            let before = effective(&layers);
            layers[Layer::File as usize] = Arc::new(entries);
            let after = effective(&layers);
            diff(&before, &after)
        };
        if !changes.is_empty() {
            self.deliver(&changes);
        }
    }

    /// Reads and installs a properties file as the file layer. On error the
    /// current layers are left untouched.
    pub fn load_file(&self, path: impl AsRef<Path>) -> Result<PropertyLayer, ConfigError> {
        let path = path.as_ref();
        let entries = read_properties_file(path)?;
        *self.file_path.lock() = Some(path.to_path_buf());
        self.replace_file_layer(entries.clone());
        Ok(PropertyLayer {
            layer: Layer::File,
            entries,
        })
    }

    /// Re-reads the last loaded file if its contents changed. Returns whether
    /// anything was reloaded.
    pub fn reload_file(&self) -> Result<bool, ConfigError> {
        let Some(path) = self.file_path.lock().clone() else {
            return Ok(false);
        };
        let entries = read_properties_file(&path)?;
        if *self.layers.read()[Layer::File as usize] == entries {
            return Ok(false);
        }
        self.replace_file_layer(entries);
        Ok(true)
    }

    /// Starts a background thread re-reading the properties file every poll
    /// interval. The thread exits once the set is dropped.
    pub fn spawn_file_poller(self: &Arc<Self>) -> thread::JoinHandle<()> {
        let weak: Weak<Self> = Arc::downgrade(self);
        let interval = self.poll_interval;
        thread::Builder::new()
            .name("property-poller".into())
            .spawn(move || loop {
                thread::sleep(interval);
                let Some(set) = weak.upgrade() else { break };
                if let Err(err) = set.reload_file() {
                    tracing::warn!(%err, "property file reload failed; keeping previous values");
                }
            })
            .expect("spawn property poller")
    }

    pub fn layer(&self, layer: Layer) -> PropertyLayer {
        PropertyLayer {
            layer,
            entries: (*self.layers.read()[layer as usize]).clone(),
        }
    }

    pub fn get_raw(&self, name: &str) -> Option<String> {
        resolve(&self.layers.read(), name).map(str::to_owned)
    }

    /// Typed lookup. `Ok(None)` when no layer defines `name`.
    pub fn get<T: PropertyValue>(&self, name: &str) -> Result<Option<T>, ConfigError> {
        match self.get_raw(name) {
            None => Ok(None),
            Some(raw) => T::parse_property(&raw).map(Some).ok_or(ConfigError::Type {
                name: name.to_string(),
                value: raw,
                expected: T::TYPE_NAME,
            }),
        }
    }

    pub fn get_or<T: PropertyValue>(&self, name: &str, fallback: T) -> Result<T, ConfigError> {
        Ok(self.get(name)?.unwrap_or(fallback))
    }

    /// All effective values.
    pub fn effective_map(&self) -> BTreeMap<String, String> {
        effective(&self.layers.read())
    }

    /// Effective values whose names start with `prefix`, with the prefix
    /// stripped.
    pub fn namespace(&self, prefix: &str) -> BTreeMap<String, String> {
        self.effective_map()
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v)))
            .collect()
    }

    /// Registers a change sink. `pattern` is an exact property name, or a
    /// prefix followed by `*`. Sinks must not mutate this set.
    pub fn watch<F>(&self, pattern: impl Into<String>, sink: F) -> WatchId
    where
        F: Fn(&PropertyChange) + Send + Sync + 'static,
    {
        let mut next = self.next_watch_id.lock();
        let id = *next;
        *next += 1;
        self.watchers.write().push(Arc::new(Watcher {
            id,
            pattern: pattern.into(),
            sink: Box::new(sink),
        }));
        WatchId(id)
    }

    pub fn unwatch(&self, id: WatchId) {
        self.watchers.write().retain(|w| w.id != id.0);
    }

    fn deliver(&self, changes: &[PropertyChange]) {
        let watchers: Vec<Arc<Watcher>> = self.watchers.read().clone();
        for watcher in &watchers {
            for change in changes.iter().filter(|c| watcher.matches(&c.name)) {
                (watcher.sink)(change);
            }
        }
    }
}

fn resolve<'a>(layers: &'a Layers, name: &str) -> Option<&'a str> {
    layers
        .iter()
        .rev()
        .find_map(|l| l.get(name))
        .map(String::as_str)
}

fn effective(layers: &Layers) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for layer in layers.iter() {
        for (k, v) in layer.iter() {
            out.insert(k.clone(), v.clone());
        }
    }
    out
}

fn diff(
    before: &BTreeMap<String, String>,
    after: &BTreeMap<String, String>,
) -> Vec<PropertyChange> {
    let names: BTreeSet<&String> = before.keys().chain(after.keys()).collect();
    names
        .into_iter()
        .filter_map(|name| {
            let old = before.get(name);
            let new = after.get(name);
            (old != new).then(|| PropertyChange {
                name: name.clone(),
                old: old.cloned(),
                new: new.cloned(),
            })
        })
        .collect()
}

fn read_properties_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Load {
        path: path.to_path_buf(),
        source,
    })?;
    parse_properties(&text).map_err(|(line, message)| ConfigError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })
}

/// Parses `name=value` lines. `#` starts a comment, whitespace around names
/// and values is trimmed and later duplicates win. Errors carry the 1-based
/// line number.
pub fn parse_properties(text: &str) -> Result<BTreeMap<String, String>, (usize, String)> {
    let mut entries = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((name, value)) = line.split_once('=') else {
            return Err((idx + 1, format!("expected `name=value`, found `{line}`")));
        };
        let name = name.trim();
        if name.is_empty() {
            return Err((idx + 1, "empty property name".to_string()));
        }
        entries.insert(name.to_string(), value.trim().to_string());
    }
    Ok(entries)
}

/// Renders entries in the format accepted by [`parse_properties`].
pub fn render_properties<'a, I>(entries: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut out = String::new();
    for (name, value) in entries {
        out.push_str(name);
        out.push('=');
        out.push_str(value);
        out.push('\n');
    }
    out
}
