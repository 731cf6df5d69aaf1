use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Bad flags, missing inputs or a config file that does not fit the command.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix: f64,
    pub finished_unix: f64,
}

/// Everything needed to re-execute a run: the command and its fully resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub timestamps: Timestamps,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid manifest {}: {e}", path.display())))
    }
}

/// Fill every option the user did not type on the command line from the `--config` JSON
/// object. Keys must name the command's options.
pub fn merge_config<A>(args: &A, matches: &ArgMatches, config: Option<&Path>) -> anyhow::Result<A>
where
    A: Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(args)?;
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: serde_json::Map<String, Value> = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {} is not a JSON object: {e}", path.display())))?;
        let resolved = value.as_object_mut().expect("options serialize to an object");
        for (key, v) in file {
            if !resolved.contains_key(&key) {
                return Err(usage(format!("config {}: unknown option `{key}`", path.display())));
            }
            if matches.value_source(&key) != Some(ValueSource::CommandLine) {
                resolved.insert(key, v);
            }
        }
    }
    from_config(value)
}

pub fn from_config<A: DeserializeOwned>(value: Value) -> anyhow::Result<A> {
    serde_json::from_value(value).map_err(|e| usage(format!("invalid configuration: {e}")))
}
