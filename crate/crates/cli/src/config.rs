//! Optional JSON config files that mirror a subcommand's long flags.
//! Flags given on the command line win; keys the subcommand does not know
//! are rejected.

use gfnlab_core::error::{Error, Result};
use serde_json::Value;

fn invalid(msg: String) -> Error {
    Error::InvalidArg(msg)
}

#[derive(Debug, Default)]
pub struct ConfigMap {
    entries: serde_json::Map<String, Value>,
}

impl ConfigMap {
    /// Loads `path` when given; otherwise an empty map, so resolution code
    /// is identical with and without a config file.
    pub fn load(path: Option<&str>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_string(),
            source,
        })?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_string(),
            detail: e.to_string(),
        })?;
        match value {
            Value::Object(entries) => Ok(Self { entries }),
            _ => Err(invalid(format!("config {path} must be a JSON object"))),
        }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.entries.remove(key)
    }

    pub fn take_str(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(invalid(format!(
                "config key `{key}` must be a string, got {other}"
            ))),
        }
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Number(n)) => n
                .as_u64()
                .map(Some)
                .ok_or_else(|| invalid(format!("config key `{key}` must be a nonnegative integer"))),
            Some(other) => Err(invalid(format!(
                "config key `{key}` must be an integer, got {other}"
            ))),
        }
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.take_u64(key)?.map(|v| v as usize))
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Number(n)) => n
                .as_f64()
                .map(Some)
                .ok_or_else(|| invalid(format!("config key `{key}` is not a finite number"))),
            Some(other) => Err(invalid(format!(
                "config key `{key}` must be a number, got {other}"
            ))),
        }
    }

    pub fn take_str_list(&mut self, key: &str) -> Result<Option<Vec<String>>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|item| match item {
                    Value::String(s) => Ok(s),
                    other => Err(invalid(format!(
                        "config key `{key}` must hold strings, got {other}"
                    ))),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(other) => Err(invalid(format!(
                "config key `{key}` must be an array, got {other}"
            ))),
        }
    }

    /// Call after every known key has been taken; anything left is a typo.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(invalid(format!("unknown config key `{key}`")));
        }
        Ok(())
    }
}
