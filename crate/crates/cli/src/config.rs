//! TOML configuration with dotted-key command-line overrides.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "VADAM_OUTPUT_DIR";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 1.
    Invalid(String),
    /// Error from the library, optionally tagged with where it happened.
    Core { context: Option<String>, source: vadam::Error },
    /// A check ran and found a violation; exit code 2.
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Core { source, .. } if source.is_numerical() => 2,
            CliError::Core { .. } => 1,
            CliError::CheckFailed(_) => 2,
        }
    }

    pub fn at(context: impl Into<String>) -> impl FnOnce(vadam::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Core { context: Some(context), source }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid configuration: {m}"),
            CliError::Core { context: Some(c), source } => write!(f, "{c}: {source}"),
            CliError::Core { context: None, source } => write!(f, "{source}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<vadam::Error> for CliError {
    fn from(source: vadam::Error) -> Self {
        CliError::Core { context: None, source }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core { context: None, source: e.into() }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core { context: None, source: e.into() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core { context: None, source: e.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// A raw configuration table plus the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct RawConfig {
    pub table: Table,
    pub base_dir: PathBuf,
}

impl RawConfig {
    pub fn load(path: Option<&Path>, sets: &[String]) -> CliResult<Self> {
        let (mut table, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", p.display())))?;
                let table: Table =
                    toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Table::new(), PathBuf::from(".")),
        };
        for s in sets {
            apply_set(&mut table, s)?;
        }
        Ok(Self { table, base_dir })
    }

    pub fn has(&self, dotted: &str) -> bool {
        let mut cur = &self.table;
        let parts: Vec<&str> = dotted.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            match cur.get(*p) {
                Some(Value::Table(t)) if i + 1 < parts.len() => cur = t,
                Some(_) if i + 1 == parts.len() => return true,
                _ => return false,
            }
        }
        false
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal, falling
/// back to a plain string.
pub fn apply_set(table: &mut Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("--set expects key=value, got {assignment:?}")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Invalid(format!("bad key in --set {assignment:?}")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Invalid(format!("--set {key}: {p} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn key_paths(table: &Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) if !t.is_empty() => key_paths(t, &path, out),
            _ => {
                out.insert(path);
            }
        }
    }
}

pub fn to_table<T: Serialize>(value: &T) -> CliResult<Table> {
    match Value::try_from(value) {
        Ok(Value::Table(t)) => Ok(t),
        Ok(_) => Err(CliError::Invalid("configuration must serialize to a table".into())),
        Err(e) => Err(CliError::Invalid(format!("cannot serialize configuration: {e}"))),
    }
}

/// Deserializes `table`, rejecting keys that the target type does not know.
pub fn parse_strict<T: DeserializeOwned + Serialize>(table: &Table) -> CliResult<T> {
    let value: T = Value::Table(table.clone()).try_into().map_err(|e| CliError::Invalid(format!("{e}")))?;
    let mut known = BTreeSet::new();
    key_paths(&to_table(&value)?, "", &mut known);
    let mut given = BTreeSet::new();
    key_paths(table, "", &mut given);
    let unknown: Vec<&String> =
        given.iter().filter(|k| !known.contains(*k) && !known.iter().any(|p| k.starts_with(&format!("{p}.")))).collect();
    if let Some(k) = unknown.first() {
        return Err(CliError::Invalid(format!("unknown configuration key {k:?}")));
    }
    Ok(value)
}

/// Output directory: flag, then environment, then config, then `runs`.
pub fn output_dir(flag: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    configured.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn write_effective<T: Serialize>(dir: &Path, cfg: &T) -> CliResult<()> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Invalid(format!("cannot serialize configuration: {e}")))?;
    std::fs::write(dir.join(EFFECTIVE_CONFIG_FILE), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Demo {
        seed: u64,
        inner: Inner,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Inner {
        alpha: f64,
        name: String,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self { seed: 1, inner: Inner::default() }
        }
    }

    impl Default for Inner {
        fn default() -> Self {
            Self { alpha: 0.5, name: "x".into() }
        }
    }

    #[test]
    fn dotted_overrides() {
        let mut t = Table::new();
        apply_set(&mut t, "inner.alpha=0.25").unwrap();
        apply_set(&mut t, "inner.name=vadam").unwrap();
        apply_set(&mut t, "seed = 7").unwrap();
        let d: Demo = parse_strict(&t).unwrap();
        assert_eq!(d, Demo { seed: 7, inner: Inner { alpha: 0.25, name: "vadam".into() } });
        assert!(apply_set(&mut t, "novalue").is_err());
        assert!(apply_set(&mut t, "a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut t = Table::new();
        apply_set(&mut t, "inner.alhpa=0.25").unwrap();
        let e = parse_strict::<Demo>(&t).unwrap_err();
        assert!(e.to_string().contains("inner.alhpa"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Invalid("x".into()).exit_code(), 1);
        assert_eq!(CliError::from(vadam::Error::NonFinite("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(vadam::Error::InvalidArgument("x".into())).exit_code(), 1);
    }
}
