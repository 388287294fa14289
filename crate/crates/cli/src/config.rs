use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use promptlab::attention::ScaleProfile;

use crate::ProfileArg;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    /// Bad input, unreadable file or a violated precondition.
    Input(String),
    /// A check ran and failed.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Check(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Check(m) => f.write_str(m),
        }
    }
}

impl From<promptlab::Error> for CliError {
    fn from(e: promptlab::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Check(e.to_string())
        }
    }
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// `base` with the top-level keys of the config file laid over it.
pub fn layered<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(base) };
    let bad = |e: serde_json::Error| CliError::Input(format!("{}: {e}", path.display()));
    let mut value = serde_json::to_value(&base).map_err(bad)?;
    let file: serde_json::Value = serde_json::from_str(&read_file(path)?).map_err(bad)?;
    let serde_json::Value::Object(over) = file else {
        return Err(CliError::Input(format!("{}: config must be a JSON object", path.display())));
    };
    if let serde_json::Value::Object(map) = &mut value {
        map.extend(over);
    }
    serde_json::from_value(value).map_err(bad)
}

pub fn profile(arg: ProfileArg) -> ScaleProfile {
    match arg {
        ProfileArg::Paper => ScaleProfile::PaperFaithful,
        ProfileArg::Desk => ScaleProfile::default(),
    }
}

pub fn write_text(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Input(format!("write failed: {e}"));
    match path {
        Some(p) => fs::write(p, text).map_err(io),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(io),
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(format!("serialize: {e}")))?;
    s.push('\n');
    Ok(s)
}
