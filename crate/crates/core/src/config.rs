//! Node configuration.
//!
//! One TOML tree with defaults for every key, so an empty file is a valid
//! configuration. Any key can be overridden from the environment as
//! `RAIL_<SECTION>_<KEY>`, e.g. `RAIL_NETWORK_QUERY_PORT=5000`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::UnknownIdPolicy;
use crate::replication::ReplicationMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("environment override {var}: {reason}")]
    Env { var: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub bind: String,
    /// Host placed in announcements.
    pub advertise_host: String,
    pub broadcast_addr: String,
    pub discovery_port: u16,
    pub ingest_port: u16,
    pub query_port: u16,
    pub announce_interval_ms: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            bind: "0.0.0.0".into(),
            advertise_host: "127.0.0.1".into(),
            broadcast_addr: "255.255.255.255".into(),
            discovery_port: crate::discovery::DEFAULT_DISCOVERY_PORT,
            ingest_port: 47400,
            query_port: 47401,
            announce_interval_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HealthConfig {
    pub heartbeat_interval_ms: u64,
    pub suspect_after: u32,
    pub failed_after: u32,
}

impl Default for HealthConfig {
    fn default() -> Self {
        Self { heartbeat_interval_ms: 500, suspect_after: 1, failed_after: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub index_paths: Vec<String>,
    pub feed_retention: usize,
    pub blob_limit_bytes: usize,
    /// Snapshot loaded at startup when non-empty.
    pub snapshot_path: String,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            index_paths: crate::objects::default_index_paths(),
            feed_retention: crate::feed::DEFAULT_RETENTION,
            blob_limit_bytes: crate::blobs::DEFAULT_BLOB_LIMIT,
            snapshot_path: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub unknown_id_policy: UnknownIdPolicy,
    pub workers: usize,
    pub max_datagram_bytes: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            unknown_id_policy: UnknownIdPolicy::CreateProvisional,
            workers: 4,
            max_datagram_bytes: crate::wire::MAX_DATAGRAM_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub subscription_buffer: usize,
    pub max_frame_bytes: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            subscription_buffer: crate::query::DEFAULT_SUBSCRIPTION_BUFFER,
            max_frame_bytes: crate::framing::DEFAULT_MAX_FRAME_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicationConfig {
    pub mode: ReplicationMode,
    /// Query address of the master to mirror; empty when running as master.
    pub master: String,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self { mode: ReplicationMode::Sync, master: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    /// Line-delimited JSON log of remediation decisions; disabled when empty.
    pub decision_log: String,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self { id: "n1".into(), decision_log: String::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub network: NetworkConfig,
    pub health: HealthConfig,
    pub stores: StoreConfig,
    pub ingest: IngestConfig,
    pub query: QueryConfig,
    pub replication: ReplicationConfig,
    pub node: NodeConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads `path` (if given), then applies `RAIL_*` environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn from_toml_with_env(
        text: &str,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut tree: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with("RAIL_")).collect();
        vars.sort();
        for (var, raw) in vars {
            let rest = &var["RAIL_".len()..];
            let Some((section, key)) = rest.split_once('_') else {
                return Err(ConfigError::Env { var, reason: "expected RAIL_<SECTION>_<KEY>".into() });
            };
            let value = parse_env_value(&raw);
            let section_table = tree
                .entry(section.to_ascii_lowercase())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match section_table {
                toml::Value::Table(t) => {
                    t.insert(key.to_ascii_lowercase(), value);
                }
                _ => return Err(ConfigError::Env { var, reason: "section is not a table".into() }),
            }
        }
        toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Interprets an override as a TOML literal, falling back to a plain string.
fn parse_env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_defaults() {
        let c = Config::from_toml_str("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.network.discovery_port, 47474);
        assert_eq!(c.health.heartbeat_interval_ms, 500);
        assert_eq!(c.health.failed_after, 3);
        assert_eq!(c.stores.index_paths, vec!["marker.*.id".to_string()]);
        assert_eq!(c.replication.mode, ReplicationMode::Sync);
    }

    #[test]
    fn env_overrides_apply() {
        let vars = vec![
            ("RAIL_NETWORK_QUERY_PORT".to_string(), "5000".to_string()),
            ("RAIL_NODE_ID".to_string(), "edge-2".to_string()),
            ("RAIL_STORES_INDEX_PATHS".to_string(), r#"["marker.*.id", "rfid.tag"]"#.to_string()),
            ("RAIL_REPLICATION_MODE".to_string(), "async".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ];
        let c = Config::from_toml_with_env("[network]\nquery_port = 1\n", vars).unwrap();
        assert_eq!(c.network.query_port, 5000);
        assert_eq!(c.node.id, "edge-2");
        assert_eq!(c.stores.index_paths.len(), 2);
        assert_eq!(c.replication.mode, ReplicationMode::Async);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml_str("[network]\nbogus = 1\n").is_err());
        let vars = vec![("RAIL_BOGUS".to_string(), "1".to_string())];
        assert!(Config::from_toml_with_env("", vars).is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}
