//! Typed runtime configuration and per-module logging.
//!
//! The key set is closed. Setting a key validates the value, stores it and
//! runs every listener subscribed to that key before returning.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(v) => f.write_str(v),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<i32> for Value {
    fn from(v: i32) -> Self {
        Value::Int(v as i64)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("type mismatch for {key}: expected {expected}, got {got:?}")]
    TypeMismatch {
        key: String,
        expected: &'static str,
        got: String,
    },
    #[error("value {value} out of range for {key}")]
    OutOfRange { key: String, value: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Int { min: i64, max: i64 },
    Float { min: f64 },
    Bool,
    Str(Option<&'static [&'static str]>),
}

impl Kind {
    fn name(&self) -> &'static str {
        match self {
            Kind::Int { .. } => "int",
            Kind::Float { .. } => "float",
            Kind::Bool => "bool",
            Kind::Str(_) => "string",
        }
    }
}

struct KeyDef {
    name: &'static str,
    kind: Kind,
    default: Value,
}

const LEVEL: Kind = Kind::Int { min: 0, max: 3 };

fn key_defs() -> Vec<KeyDef> {
    let mut v: Vec<KeyDef> = LOG_MODULES
        .iter()
        .map(|m| KeyDef {
            name: log_key(m),
            kind: LEVEL,
            default: Value::Int(0),
        })
        .collect();
    let more = [
        (
            "engine.tier_threshold",
            Kind::Int {
                min: 0,
                max: i64::MAX,
            },
            Value::Int(16),
        ),
        (
            "engine.cache",
            Kind::Str(Some(&["unbounded", "lru", "none"])),
            Value::from("unbounded"),
        ),
        (
            "engine.cache_capacity",
            Kind::Int {
                min: 1,
                max: 1 << 24,
            },
            Value::Int(4096),
        ),
        (
            "engine.max_block_instrs",
            Kind::Int { min: 1, max: 4096 },
            Value::Int(32),
        ),
        (
            "engine.backend",
            Kind::Str(Some(&["predecoded", "none"])),
            Value::from("predecoded"),
        ),
        (
            "stop.threshold_metrics",
            Kind::Float { min: 0.0 },
            Value::Float(0.0),
        ),
        (
            "stop.metrics_per_second",
            Kind::Float { min: 0.0 },
            Value::Float(0.0),
        ),
        ("stop.weights", Kind::Str(None), Value::from("")),
        ("mmu.enforce_protection", Kind::Bool, Value::Bool(false)),
        ("mmu.slow_path_only", Kind::Bool, Value::Bool(false)),
    ];
    v.extend(more.into_iter().map(|(name, kind, default)| KeyDef {
        name,
        kind,
        default,
    }));
    v
}

fn log_key(m: &str) -> &'static str {
    match m {
        "ir" => "log.ir",
        "engine" => "log.engine",
        "mmu" => "log.mmu",
        "vfs" => "log.vfs",
        "loader" => "log.loader",
        "probes" => "log.probes",
        _ => "log.metrics",
    }
}

/// Accepts the colon form `log:ir` as an alias for `log.ir`.
pub fn normalize_key(key: &str) -> String {
    key.trim().replace(':', ".")
}

pub type Listener = Box<dyn FnMut(&str, &Value)>;

pub struct ConfigStore {
    defs: Vec<KeyDef>,
    values: BTreeMap<&'static str, Value>,
    listeners: Vec<(u64, &'static str, Listener)>,
    next_id: u64,
}

impl Default for ConfigStore {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for ConfigStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.values.iter()).finish()
    }
}

impl ConfigStore {
    pub fn new() -> Self {
        let defs = key_defs();
        let values = defs.iter().map(|d| (d.name, d.default.clone())).collect();
        ConfigStore {
            defs,
            values,
            listeners: Vec::new(),
            next_id: 1,
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.defs.iter().map(|d| d.name)
    }

    fn def(&self, key: &str) -> Result<&KeyDef, ConfigError> {
        let k = normalize_key(key);
        self.defs
            .iter()
            .find(|d| d.name == k)
            .ok_or(ConfigError::UnknownKey(key.to_string()))
    }

    fn check(def: &KeyDef, v: Value) -> Result<Value, ConfigError> {
        let mismatch = |v: &Value| ConfigError::TypeMismatch {
            key: def.name.to_string(),
            expected: def.kind.name(),
            got: v.to_string(),
        };
        let range = |v: &Value| ConfigError::OutOfRange {
            key: def.name.to_string(),
            value: v.to_string(),
        };
        match (def.kind, v) {
            (Kind::Int { min, max }, Value::Int(i)) => {
                if (min..=max).contains(&i) {
                    Ok(Value::Int(i))
                } else {
                    Err(range(&Value::Int(i)))
                }
            }
            (Kind::Float { .. }, Value::Int(i)) => Self::check(def, Value::Float(i as f64)),
            (Kind::Float { min }, Value::Float(x)) => {
                if x.is_finite() && x >= min {
                    Ok(Value::Float(x))
                } else {
                    Err(range(&Value::Float(x)))
                }
            }
            (Kind::Bool, Value::Bool(b)) => Ok(Value::Bool(b)),
            (Kind::Str(allowed), Value::Str(s)) => match allowed {
                Some(list) if !list.contains(&s.as_str()) => Err(range(&Value::Str(s))),
                _ => Ok(Value::Str(s)),
            },
            (_, v) => Err(mismatch(&v)),
        }
    }

    /// Parses `text` according to the key's type.
    pub fn parse(&self, key: &str, text: &str) -> Result<Value, ConfigError> {
        let def = self.def(key)?;
        let t = text.trim();
        let mismatch = || ConfigError::TypeMismatch {
            key: def.name.to_string(),
            expected: def.kind.name(),
            got: t.to_string(),
        };
        Ok(match def.kind {
            Kind::Int { .. } => {
                let v = if let Some(h) = t.strip_prefix("0x") {
                    i64::from_str_radix(h, 16)
                } else {
                    t.parse()
                };
                Value::Int(v.map_err(|_| mismatch())?)
            }
            Kind::Float { .. } => Value::Float(t.parse().map_err(|_| mismatch())?),
            Kind::Bool => Value::Bool(match t {
                "1" | "true" | "on" | "yes" => true,
                "0" | "false" | "off" | "no" => false,
                _ => return Err(mismatch()),
            }),
            Kind::Str(_) => Value::Str(t.to_string()),
        })
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> Result<(), ConfigError> {
        let def = self.def(key)?;
        let name = def.name;
        let v = Self::check(def, value.into())?;
        self.values.insert(name, v.clone());
        for (_, k, l) in self.listeners.iter_mut() {
            if *k == name {
                l(name, &v);
            }
        }
        Ok(())
    }

    pub fn set_str(&mut self, key: &str, text: &str) -> Result<(), ConfigError> {
        let v = self.parse(key, text)?;
        self.set(key, v)
    }

    pub fn get(&self, key: &str) -> Result<&Value, ConfigError> {
        let name = self.def(key)?.name;
        Ok(&self.values[name])
    }

    pub fn get_int(&self, key: &str) -> i64 {
        match self.get(key) {
            Ok(Value::Int(v)) => *v,
            _ => 0,
        }
    }

    pub fn get_float(&self, key: &str) -> f64 {
        match self.get(key) {
            Ok(Value::Float(v)) => *v,
            Ok(Value::Int(v)) => *v as f64,
            _ => 0.0,
        }
    }

    pub fn get_bool(&self, key: &str) -> bool {
        matches!(self.get(key), Ok(Value::Bool(true)))
    }

    pub fn get_str(&self, key: &str) -> String {
        match self.get(key) {
            Ok(v) => v.to_string(),
            Err(_) => String::new(),
        }
    }

    pub fn subscribe(&mut self, key: &str, listener: Listener) -> Result<u64, ConfigError> {
        let name = self.def(key)?.name;
        let id = self.next_id;
        self.next_id += 1;
        self.listeners.push((id, name, listener));
        Ok(id)
    }

    pub fn unsubscribe(&mut self, id: u64) -> bool {
        let n = self.listeners.len();
        self.listeners.retain(|(i, _, _)| *i != id);
        self.listeners.len() != n
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn load_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            self.set_str(k.trim(), v.trim())
                .map_err(|e| ConfigError::Syntax {
                    line: n + 1,
                    msg: e.to_string(),
                })?;
        }
        Ok(())
    }

    /// Parses a `key=value` pair from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or(ConfigError::Syntax {
            line: 0,
            msg: format!("expected key=value, got {pair:?}"),
        })?;
        self.set_str(k, v)
    }
}

pub const LOG_MODULES: [&str; 7] = ["ir", "engine", "mmu", "vfs", "loader", "probes", "metrics"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum LogModule {
    Ir,
    Engine,
    Mmu,
    Vfs,
    Loader,
    Probes,
    Metrics,
}

impl LogModule {
    pub fn from_name(name: &str) -> Option<LogModule> {
        use LogModule::*;
        let all = [Ir, Engine, Mmu, Vfs, Loader, Probes, Metrics];
        LOG_MODULES.iter().position(|m| *m == name).map(|i| all[i])
    }

    pub fn name(self) -> &'static str {
        LOG_MODULES[self as usize]
    }
}

pub const LEVEL_OFF: u8 = 0;
pub const LEVEL_INFO: u8 = 1;
pub const LEVEL_DEBUG: u8 = 2;
pub const LEVEL_TRACE: u8 = 3;

/// Per-module leveled logger. Lines are buffered for the owner to drain
/// and optionally echoed to stderr.
#[derive(Debug, Clone, Default)]
pub struct Logger {
    levels: [u8; 7],
    lines: Vec<String>,
    pub echo_stderr: bool,
}

impl Logger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_level(&mut self, m: LogModule, level: u8) {
        self.levels[m as usize] = level.min(LEVEL_TRACE);
    }

    pub fn level(&self, m: LogModule) -> u8 {
        self.levels[m as usize]
    }

    #[inline]
    pub fn enabled(&self, m: LogModule, level: u8) -> bool {
        level > LEVEL_OFF && self.levels[m as usize] >= level
    }

    /// Logs `msg` when the module is at `level` or above. The label is
    /// the message's own severity.
    pub fn log(&mut self, m: LogModule, level: u8, msg: impl FnOnce() -> String) {
        if self.enabled(m, level) {
            let label = match level {
                LEVEL_INFO => "INFO",
                LEVEL_DEBUG => "DEBUG",
                _ => "TRACE",
            };
            self.emit(label, m, &msg());
        }
    }

    /// Writes one `LABEL - module - message` line (multi-line messages
    /// keep their continuation lines verbatim).
    pub fn emit(&mut self, label: &str, m: LogModule, msg: &str) {
        let line = format!("{label} - {} - {msg}", m.name());
        if self.echo_stderr {
            eprintln!("{line}");
        }
        self.lines.push(line);
    }

    /// Appends a continuation line without a prefix.
    pub fn raw(&mut self, line: &str) {
        if self.echo_stderr {
            eprintln!("{line}");
        }
        self.lines.push(line.to_string());
    }

    pub fn take_lines(&mut self) -> Vec<String> {
        std::mem::take(&mut self.lines)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::rc::Rc;

    #[test]
    fn set_get_roundtrip() {
        let mut c = ConfigStore::new();
        c.set("log.ir", 1).unwrap();
        assert_eq!(c.get("log.ir").unwrap(), &Value::Int(1));
        c.set_str("log:ir", "2").unwrap();
        assert_eq!(c.get_int("log.ir"), 2);
        assert_eq!(c.get_int("engine.tier_threshold"), 16);
        c.set("stop.threshold_metrics", 150).unwrap();
        assert_eq!(c.get_float("stop.threshold_metrics"), 150.0);
    }

    #[test]
    fn errors() {
        let mut c = ConfigStore::new();
        assert!(matches!(
            c.set("log.ir", "high"),
            Err(ConfigError::TypeMismatch { .. })
        ));
        assert!(matches!(
            c.set_str("log.ir", "high"),
            Err(ConfigError::TypeMismatch { .. })
        ));
        assert!(matches!(
            c.set("no.such", 1),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            c.set("log.ir", 9),
            Err(ConfigError::OutOfRange { .. })
        ));
        assert!(matches!(
            c.set("engine.cache", "fifo"),
            Err(ConfigError::OutOfRange { .. })
        ));
        assert!(c.get("no.such").is_err());
    }

    #[test]
    fn listeners_fire_before_set_returns() {
        let mut c = ConfigStore::new();
        let seen = Rc::new(RefCell::new(Vec::new()));
        let s = seen.clone();
        let id = c
            .subscribe(
                "engine.cache",
                Box::new(move |k, v| s.borrow_mut().push(format!("{k}={v}"))),
            )
            .unwrap();
        c.set("engine.cache", "lru").unwrap();
        assert_eq!(*seen.borrow(), ["engine.cache=lru"]);
        c.set("log.ir", 1).unwrap();
        assert_eq!(seen.borrow().len(), 1);
        assert!(c.unsubscribe(id));
        c.set("engine.cache", "unbounded").unwrap();
        assert_eq!(seen.borrow().len(), 1);
    }

    #[test]
    fn config_file() {
        let mut c = ConfigStore::new();
        c.load_str("# comment\nengine.cache = lru\nlog.ir = 1\n\nmmu.enforce_protection = true\n")
            .unwrap();
        assert_eq!(c.get_str("engine.cache"), "lru");
        assert!(c.get_bool("mmu.enforce_protection"));
        assert!(matches!(
            c.load_str("bogus"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn level_zero_is_silent() {
        let mut l = Logger::new();
        for level in 1..=3 {
            l.log(LogModule::Engine, level, || "x".into());
        }
        assert!(l.take_lines().is_empty());
        l.set_level(LogModule::Engine, 2);
        l.log(LogModule::Engine, 2, || "hello".into());
        l.log(LogModule::Engine, 3, || "hidden".into());
        assert_eq!(l.take_lines(), ["DEBUG - engine - hello"]);
    }
}
