//! JSON configs with dotted-key overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// Parsed config file, or `{}` without one. A missing file is an I/O error,
/// unparsable JSON a config error.
pub fn read_config(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
    }
    Ok(value)
}

/// Splits `key=value`. The value is read as JSON when it parses, else as a string.
pub fn parse_set(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got '{arg}'")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override key '{key}'")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

/// Sets `a.b.c` inside `root`, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("cannot set '{key}': '{part}' is inside a non-object")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_owned(), value);
            return Ok(());
        }
        node = obj.entry(part.to_owned()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

pub fn resolve<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}
