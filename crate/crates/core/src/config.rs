//! Flat key-value config files.
//!
//! The syntax is the flat subset of TOML: one `key = value` per line,
//! values are numbers, strings, booleans or arrays of those. Nested
//! tables are rejected. Every reader marks the keys it consumes and
//! [`KeyValues::finish`] fails on anything left over, so a typo never
//! silently falls back to a default.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KeyValues {
    origin: String,
    base_dir: PathBuf,
    table: Table,
    used: RefCell<BTreeSet<String>>,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))?;
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!(
                "{origin}: `{k}` is a table; config files are flat key = value lists"
            )));
        }
        Ok(KeyValues {
            origin: origin.to_string(),
            base_dir: PathBuf::from("."),
            table,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut kv = Self::parse(&text, &path.display().to_string())?;
        kv.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(kv)
    }

    pub fn empty() -> Self {
        KeyValues {
            origin: "<defaults>".into(),
            base_dir: PathBuf::from("."),
            table: Table::new(),
            used: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    /// Insert or replace a value (used for command-line overrides).
    pub fn set(&mut self, key: &str, value: Value) {
        self.table.insert(key.to_string(), value);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        let v = self.table.get(key);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    fn bad(&self, key: &str, want: &str, v: &Value) -> Error {
        Error::Config(format!(
            "{}: `{key}` must be {want}, found {}",
            self.origin,
            type_name(v)
        ))
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => Err(self.bad(key, "a number", v)),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64(key)?.unwrap_or(default))
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(v) => Err(self.bad(key, "a non-negative integer", v)),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.usize(key)?.unwrap_or(default))
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        Ok(self.usize(key)?.map(|v| v as u64))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(v) => Err(self.bad(key, "a boolean", v)),
        }
    }

    pub fn str(&self, key: &str) -> Result<Option<String>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(self.bad(key, "a string", v)),
        }
    }

    pub fn required_str(&self, key: &str) -> Result<String> {
        self.str(key)?
            .ok_or_else(|| Error::Config(format!("{}: missing required key `{key}`", self.origin)))
    }

    /// A number or an array of numbers.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let one = |x: &Value| match x {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            other => Err(self.bad(key, "a number or an array of numbers", other)),
        };
        match v {
            Value::Array(items) => items.iter().map(one).collect::<Result<_>>().map(Some),
            other => one(other).map(|x| Some(vec![x])),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let one = |x: &Value| match x {
            Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            other => Err(self.bad(key, "a non-negative integer or an array of them", other)),
        };
        match v {
            Value::Array(items) => items.iter().map(one).collect::<Result<_>>().map(Some),
            other => one(other).map(|x| Some(vec![x])),
        }
    }

    pub fn str_list(&self, key: &str) -> Result<Option<Vec<String>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let one = |x: &Value| match x {
            Value::String(s) => Ok(s.clone()),
            other => Err(self.bad(key, "a string or an array of strings", other)),
        };
        match v {
            Value::Array(items) => items.iter().map(one).collect::<Result<_>>().map(Some),
            other => one(other).map(|x| Some(vec![x])),
        }
    }

    /// Resolve a path relative to the config file's directory.
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Error on keys nobody consumed.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .table
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{}: unknown key(s): {}",
                self.origin,
                unknown.join(", ")
            )))
        }
    }

    /// The consumed entries in key order, for echoing into reports.
    pub fn echo(&self) -> serde_json::Map<String, serde_json::Value> {
        let used = self.used.borrow();
        self.table
            .iter()
            .filter(|(k, _)| used.contains(*k))
            .map(|(k, v)| (k.clone(), toml_to_json(v)))
            .collect()
    }
}

fn toml_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::String(s) => s.clone().into(),
        Value::Integer(i) => (*i).into(),
        Value::Float(f) => (*f).into(),
        Value::Boolean(b) => (*b).into(),
        Value::Datetime(d) => d.to_string().into(),
        Value::Array(a) => a.iter().map(toml_to_json).collect(),
        Value::Table(t) => t.iter().map(|(k, v)| (k.clone(), toml_to_json(v))).collect(),
    }
}
