//! Cluster configuration, loadable from a `key=value` text file.

use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportMode {
    Sim,
    Concurrent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterConfig {
    pub nodes: u32,
    pub workers_per_node: u32,
    pub transport: TransportMode,
    pub latency_ticks: u64,
    pub seed: u64,
    /// Broadcast TID watermarks and recent commit stamps every this many
    /// commits per node.
    pub watermark_interval: u32,
    pub lock_timeout_ticks: u64,
    /// Simulated ticks between a worker finishing one transaction and
    /// starting the next.
    pub think_ticks: u64,
    /// Give up on a program after this many aborted attempts.
    pub max_retries: u32,
    /// Concurrent mode: per-request service delay at the coordinator, in
    /// microseconds.
    pub coord_delay_us: u64,
    /// Concurrent mode: per-transaction think time, in microseconds.
    pub think_us: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            nodes: 4,
            workers_per_node: 8,
            transport: TransportMode::Sim,
            latency_ticks: 5,
            seed: 1,
            watermark_interval: 64,
            lock_timeout_ticks: 2000,
            think_ticks: 1,
            max_retries: 50,
            coord_delay_us: 0,
            think_us: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {0}: expected key=value")]
    Syntax(usize),
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`")]
    BadValue { line: usize, key: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

impl ClusterConfig {
    pub fn from_kv_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ClusterConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || ConfigError::BadValue { line: i + 1, key: key.to_string() };
            match key {
                "nodes" => cfg.nodes = value.parse().map_err(|_| bad())?,
                "workers_per_node" => cfg.workers_per_node = value.parse().map_err(|_| bad())?,
                "transport" => {
                    cfg.transport = match value {
                        "sim" => TransportMode::Sim,
                        "concurrent" => TransportMode::Concurrent,
                        _ => return Err(bad()),
                    }
                }
                "latency_ticks" => cfg.latency_ticks = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "watermark_interval" => cfg.watermark_interval = value.parse().map_err(|_| bad())?,
                "lock_timeout_ticks" => cfg.lock_timeout_ticks = value.parse().map_err(|_| bad())?,
                "think_ticks" => cfg.think_ticks = value.parse().map_err(|_| bad())?,
                "max_retries" => cfg.max_retries = value.parse().map_err(|_| bad())?,
                "coord_delay_us" => cfg.coord_delay_us = value.parse().map_err(|_| bad())?,
                "think_us" => cfg.think_us = value.parse().map_err(|_| bad())?,
                _ => return Err(ConfigError::UnknownKey { line: i + 1, key: key.to_string() }),
            }
        }
        Ok(cfg)
    }

    pub fn from_kv_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::from_kv_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_spec_keys() {
        let cfg = ClusterConfig::from_kv_str(
            "nodes=8\nworkers_per_node=4\ntransport=concurrent\nlatency_ticks=3\nseed=99\nwatermark_interval=16\nlock_timeout_ticks=500\n",
        )
        .unwrap();
        assert_eq!(cfg.nodes, 8);
        assert_eq!(cfg.workers_per_node, 4);
        assert_eq!(cfg.transport, TransportMode::Concurrent);
        assert_eq!(cfg.latency_ticks, 3);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.watermark_interval, 16);
        assert_eq!(cfg.lock_timeout_ticks, 500);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ClusterConfig::from_kv_str("# comment\n\nnodes = 2\n").unwrap();
        assert_eq!(cfg.nodes, 2);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ClusterConfig::from_kv_str("nodez=2\n").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { line: 1, key: "nodez".into() });
    }

    #[test]
    fn bad_value_rejected() {
        let err = ClusterConfig::from_kv_str("nodes=two\n").unwrap_err();
        assert_eq!(err, ConfigError::BadValue { line: 1, key: "nodes".into() });
    }
}
