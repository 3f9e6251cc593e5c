//! The TOML run configuration, one section per pipeline module.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use waon_core::bloom::optimal_dimensions;
use waon_core::{BloomParams, FilterConfig, LangConfig};

use crate::fetch::FetchPolicy;

/// Inputs and outputs of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Snapshot id stamped on every pair, e.g. `2025-18`.
    pub snapshot_id: String,
    /// WARC files, plain or gzip.
    pub inputs: Vec<PathBuf>,
    /// File listing WARC URLs (one per line), fetched in addition to `inputs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url_list: Option<PathBuf>,
    /// Output directory.
    pub out_dir: PathBuf,
    /// Directory served by the offline fetcher as `<host>/<path>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offline_root: Option<PathBuf>,
    /// Candidates fetched and filtered per batch.
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            snapshot_id: "2025-18".to_string(),
            inputs: Vec::new(),
            url_list: None,
            out_dir: PathBuf::from("out"),
            offline_root: None,
            batch_size: 4096,
        }
    }
}

/// WARC reading limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Records with a larger body are skipped and counted.
    pub max_record_bytes: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { max_record_bytes: crate::warc::DEFAULT_MAX_RECORD_BYTES }
    }
}

/// Which scorer backs the NSFW and alignment filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerBackend {
    /// Deterministic hash-based scores, for tests.
    Mock,
    /// An external process speaking the sidecar protocol.
    Sidecar,
}

/// How to reach the sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SidecarTransport {
    /// Line-delimited JSON over TCP at `endpoint` (`host:port`).
    Tcp,
    /// `POST <endpoint>/score`.
    Http,
    /// Line-delimited JSON over the stdio of `command`.
    Stdio,
}

/// Scorer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Scorer implementation.
    pub backend: ScorerBackend,
    /// Sidecar transport.
    pub transport: SidecarTransport,
    /// `host:port` for TCP, base URL for HTTP.
    pub endpoint: String,
    /// Program and arguments for stdio.
    pub command: Vec<String>,
    /// Parallel sidecar connections.
    pub connections: usize,
    /// Per-request timeout.
    pub timeout_ms: u64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            backend: ScorerBackend::Sidecar,
            transport: SidecarTransport::Tcp,
            endpoint: "127.0.0.1:8765".to_string(),
            command: Vec::new(),
            connections: 1,
            timeout_ms: 120_000,
        }
    }
}

/// Shard layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Pairs per shard.
    pub shard_size: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { shard_size: 10_000 }
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Inputs and outputs.
    pub run: RunConfig,
    /// WARC reading.
    pub ingest: IngestConfig,
    /// Language gate.
    pub doc_gate: LangConfig,
    /// Bloom filter sizing, per key kind.
    pub dedup: BloomParams,
    /// Image download.
    pub fetch: FetchPolicy,
    /// Image and score thresholds.
    pub filters: FilterConfig,
    /// Scorer.
    pub scoring: ScoringConfig,
    /// Shards.
    pub output: OutputConfig,
}

/// One invalid setting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    /// Dotted key, e.g. `filters.aspect_min`.
    pub field: String,
    /// What is wrong.
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Why a configuration could not be loaded.
#[derive(Debug, thiserror::Error)]
pub enum ConfigLoadError {
    /// File unreadable.
    #[error("cannot read {path}: {source}")]
    Io {
        /// Config path.
        path: PathBuf,
        /// Cause.
        source: std::io::Error,
    },
    /// Not valid TOML or wrong types or unknown keys.
    #[error("{path}: {message}")]
    Parse {
        /// Config path.
        path: PathBuf,
        /// Parser diagnostic, naming the key.
        message: String,
    },
    /// Parsed, but values are out of range.
    #[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl Config {
    /// Every violated constraint, empty when the config is usable.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs: Vec<FieldError> = Vec::new();
        let mut push = |field: &str, message: &str| errs.push(FieldError { field: field.to_string(), message: message.to_string() });
        for e in self.filters.validate() {
            push(e.field, e.message);
        }
        for (field, message) in self.fetch.validate() {
            push(field, &message);
        }
        if self.doc_gate.target_lang.trim().is_empty() {
            push("doc_gate.target_lang", "must not be empty");
        }
        if !(0.0..=1.0).contains(&self.doc_gate.lang_min_confidence) {
            push("doc_gate.lang_min_confidence", "must lie in [0, 1]");
        }
        if let Err(e) = optimal_dimensions(self.dedup.capacity, self.dedup.target_fpr) {
            let field = if self.dedup.capacity == 0 { "dedup.capacity" } else { "dedup.target_fpr" };
            push(field, &format!("cannot size a Bloom filter: {e}"));
        }
        if self.ingest.max_record_bytes == 0 {
            push("ingest.max_record_bytes", "must be at least 1");
        }
        if self.run.snapshot_id.trim().is_empty() {
            push("run.snapshot_id", "must not be empty");
        }
        if self.run.batch_size == 0 {
            push("run.batch_size", "must be at least 1");
        }
        if self.output.shard_size == 0 {
            push("output.shard_size", "must be at least 1");
        }
        if self.scoring.connections == 0 {
            push("scoring.connections", "must be at least 1");
        }
        if self.scoring.timeout_ms == 0 {
            push("scoring.timeout_ms", "must be at least 1");
        }
        if self.scoring.backend == ScorerBackend::Sidecar {
            match self.scoring.transport {
                SidecarTransport::Stdio if self.scoring.command.is_empty() => push("scoring.command", "required for the stdio transport"),
                SidecarTransport::Tcp | SidecarTransport::Http if self.scoring.endpoint.trim().is_empty() => {
                    push("scoring.endpoint", "required for tcp and http transports")
                }
                _ => {}
            }
        }
        errs
    }

    /// Parses and validates TOML text. Relative paths stay relative.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigLoadError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigLoadError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigLoadError::Invalid(errs))
        }
    }

    /// Loads `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigLoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigLoadError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.run.inputs.iter_mut().for_each(fix);
        fix(&mut self.run.out_dir);
        if let Some(p) = self.run.url_list.as_mut() {
            fix(p);
        }
        if let Some(p) = self.run.offline_root.as_mut() {
            fix(p);
        }
    }

    /// The reference configuration: every default written out.
    pub fn reference_toml() -> String {
        let mut s = String::from(
            "# Reference configuration. Every key is shown with its default value.\n\
             # Thresholds: images need min_dim px per side, an aspect ratio in\n\
             # [aspect_min, aspect_max] and at least min_unique_colors colors;\n\
             # pairs with nsfw > nsfw_max or align < alignment_min are dropped.\n\n",
        );
        s.push_str(&toml::to_string_pretty(&Config::default()).expect("serializable"));
        s
    }
}
