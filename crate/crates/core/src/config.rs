//! Experiment configuration, loaded from JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index_tensor::{CombinedIndexSpace, ValueMode};
use crate::ring_engine::{DirectionPolicy, MAX_LANES};
use crate::transport::SimLinkConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("cannot read configuration {path}: {reason}")]
    Io { path: String, reason: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// The offending field for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inprocess,
    Sim,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inprocess" => Ok(TransportKind::Inprocess),
            "sim" => Ok(TransportKind::Sim),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(ConfigError::invalid(
                "transport",
                format!("unknown transport {other:?} (expected inprocess, sim or tcp)"),
            )),
        }
    }
}

/// Tensor and payload sizes for a memory report, when they differ from the
/// experiment's own index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryShape {
    pub gt_entries: u64,
    pub gsigma_matrix_bytes: u64,
}

fn default_one() -> usize {
    1
}

fn default_timeout() -> f64 {
    30.0
}

fn default_true() -> bool {
    true
}

fn default_rendezvous() -> String {
    "127.0.0.1:0".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_k: usize,
    #[serde(default = "default_one")]
    pub n_w: usize,
    pub world_size: usize,
    pub subring_size: usize,
    #[serde(default = "default_one")]
    pub lanes: usize,
    pub measurements: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub value_mode: ValueMode,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default)]
    pub direction: DirectionPolicy,
    #[serde(default)]
    pub link: SimLinkConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Seconds a lane may go without any progress before the run is
    /// declared deadlocked (real-time transports only).
    #[serde(default = "default_timeout")]
    pub deadlock_timeout_s: f64,
    /// Listen address of rank 0 for the TCP transport.
    #[serde(default = "default_rendezvous")]
    pub rendezvous: String,
    #[serde(default = "default_true")]
    pub instrument: bool,
    #[serde(default)]
    pub memory_shape: Option<MemoryShape>,
}

impl ExperimentConfig {
    /// A valid configuration with defaults for everything but the shape.
    pub fn new(n: usize, world_size: usize, subring_size: usize, lanes: usize, measurements: u64) -> Self {
        Self {
            n_k: n,
            n_w: 1,
            world_size,
            subring_size,
            lanes,
            measurements,
            seed: 0,
            value_mode: ValueMode::default(),
            transport: TransportKind::default(),
            direction: DirectionPolicy::default(),
            link: SimLinkConfig::default(),
            output_dir: None,
            deadlock_timeout_s: default_timeout(),
            rendezvous: default_rendezvous(),
            instrument: true,
            memory_shape: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn space(&self) -> Result<CombinedIndexSpace, ConfigError> {
        CombinedIndexSpace::new(self.n_k, self.n_w).map_err(|e| ConfigError::invalid("n_k", e.to_string()))
    }

    pub fn subrings(&self) -> usize {
        self.world_size / self.subring_size.max(1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_k == 0 {
            return Err(ConfigError::invalid("n_k", "must be at least 1"));
        }
        if self.n_w == 0 {
            return Err(ConfigError::invalid("n_w", "must be at least 1"));
        }
        if self.world_size == 0 {
            return Err(ConfigError::invalid("world_size", "must be at least 1"));
        }
        if self.subring_size == 0 {
            return Err(ConfigError::invalid("subring_size", "must be at least 1"));
        }
        if !self.world_size.is_multiple_of(self.subring_size) {
            return Err(ConfigError::invalid(
                "subring_size",
                format!(
                    "{} does not divide world_size {}",
                    self.subring_size, self.world_size
                ),
            ));
        }
        let n = self.n_k * self.n_w;
        if self.subring_size > n {
            return Err(ConfigError::invalid(
                "subring_size",
                format!(
                    "{} ranks cannot each own a slice of an axis of length {n}",
                    self.subring_size
                ),
            ));
        }
        if self.lanes == 0 || self.lanes >= MAX_LANES {
            return Err(ConfigError::invalid(
                "lanes",
                format!("must be in [1, {MAX_LANES}), got {}", self.lanes),
            ));
        }
        if !(self.deadlock_timeout_s > 0.0 && self.deadlock_timeout_s.is_finite()) {
            return Err(ConfigError::invalid("deadlock_timeout_s", "must be positive"));
        }
        self.link
            .validate()
            .map_err(|e| ConfigError::invalid(format!("link.{}", e.field), e.reason))?;
        if let Some(shape) = self.memory_shape {
            if shape.gt_entries == 0 {
                return Err(ConfigError::invalid("memory_shape.gt_entries", "must be positive"));
            }
            if shape.gsigma_matrix_bytes == 0 {
                return Err(ConfigError::invalid(
                    "memory_shape.gsigma_matrix_bytes",
                    "must be positive",
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_gets_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"n_k": 4, "world_size": 2, "subring_size": 2, "measurements": 1}"#,
        )
        .unwrap();
        assert_eq!(cfg, ExperimentConfig::new(4, 2, 2, 1, 1));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_json(
            r#"{"n_k": 4, "world_size": 2, "subring_size": 2, "measurements": 1, "subring": 3}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Parse(m) if m.contains("subring")));
    }

    #[test]
    fn validation_names_the_field() {
        let field = |c: ExperimentConfig| c.validate().unwrap_err().field().unwrap().to_string();
        assert_eq!(field(ExperimentConfig::new(8, 6, 4, 1, 1)), "subring_size");
        assert_eq!(field(ExperimentConfig::new(4, 6, 6, 1, 1)), "subring_size");
        assert_eq!(field(ExperimentConfig::new(8, 2, 2, 1000, 1)), "lanes");
        assert_eq!(field(ExperimentConfig::new(8, 0, 1, 1, 1)), "world_size");
        let mut c = ExperimentConfig::new(8, 2, 2, 1, 1);
        c.link.latency_s = -1.0;
        assert_eq!(field(c), "link.latency_s");
    }

    #[test]
    fn json_roundtrip() {
        let mut cfg = ExperimentConfig::new(6, 6, 3, 7, 4);
        cfg.value_mode = ValueMode::Integer;
        cfg.direction = DirectionPolicy::Alternate;
        cfg.link.charged_message_bytes = Some(1_700_000);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
