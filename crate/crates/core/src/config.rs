//! TOML configuration for the master and worker roles.
//!
//! Any key can be overridden with a dotted `key=value` assignment
//! (`run.pairs=20`, `analysis.esd=2.8`); the value is read as a TOML value
//! and falls back to a plain string.

use std::path::{Path, PathBuf};

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::AnalysisConfig;
use crate::dashcam::{DownloadMode, LoopMode};
use crate::model::{profiles, HardwareInfo};
use crate::scheduler::SchedulePolicy;
use crate::wire::DEFAULT_CHUNK_SIZE;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid override `{0}`, expected key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A hardware profile name and/or explicit fields; fields override the profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareSection {
    pub profile: Option<String>,
    pub cpu_freq_mhz: Option<u32>,
    pub cpu_cores: Option<u32>,
    pub total_ram_mb: Option<u64>,
    pub avail_ram_mb: Option<u64>,
    pub total_storage_mb: Option<u64>,
    pub avail_storage_mb: Option<u64>,
    pub battery_pct: Option<u8>,
}

impl HardwareSection {
    pub fn from_info(hw: HardwareInfo) -> Self {
        HardwareSection {
            profile: None,
            cpu_freq_mhz: Some(hw.cpu_freq_mhz),
            cpu_cores: Some(hw.cpu_cores),
            total_ram_mb: Some(hw.total_ram_mb),
            avail_ram_mb: Some(hw.avail_ram_mb),
            total_storage_mb: Some(hw.total_storage_mb),
            avail_storage_mb: Some(hw.avail_storage_mb),
            battery_pct: Some(hw.battery_pct),
        }
    }

    pub fn resolve(&self) -> Result<HardwareInfo, ConfigError> {
        let base = match &self.profile {
            Some(p) => Some(
                profiles::by_name(p).ok_or_else(|| ConfigError::Invalid(format!("unknown hardware profile `{p}`")))?,
            ),
            None => None,
        };
        let field = |v: Option<u64>, from_base: fn(&HardwareInfo) -> u64, name: &str| {
            v.or(base.as_ref().map(from_base))
                .ok_or_else(|| ConfigError::Invalid(format!("hardware.{name} is required without a profile")))
        };
        let hw = HardwareInfo {
            cpu_freq_mhz: field(self.cpu_freq_mhz.map(u64::from), |b| b.cpu_freq_mhz.into(), "cpu_freq_mhz")? as u32,
            cpu_cores: field(self.cpu_cores.map(u64::from), |b| b.cpu_cores.into(), "cpu_cores")? as u32,
            total_ram_mb: field(self.total_ram_mb, |b| b.total_ram_mb, "total_ram_mb")?,
            avail_ram_mb: field(self.avail_ram_mb, |b| b.avail_ram_mb, "avail_ram_mb")?,
            total_storage_mb: field(self.total_storage_mb, |b| b.total_storage_mb, "total_storage_mb")?,
            avail_storage_mb: field(self.avail_storage_mb, |b| b.avail_storage_mb, "avail_storage_mb")?,
            battery_pct: field(self.battery_pct.map(u64::from), |b| b.battery_pct.into(), "battery_pct")? as u8,
        };
        hw.validate().map_err(|e| ConfigError::Invalid(format!("hardware: {e}")))?;
        Ok(hw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Read manifests straight from a catalog directory.
    #[default]
    Catalog,
    /// Talk to a running dash-cam service.
    Service,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownloadKind {
    #[default]
    Simulated,
    Service,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopKind {
    #[default]
    Test,
    Latest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DashCamSection {
    pub source: SourceKind,
    pub catalog_dir: Option<PathBuf>,
    pub service_addr: Option<String>,
    pub download: DownloadKind,
    pub simulated_download_ms: u64,
    pub enqueue_overhead_ms: u64,
    pub loop_mode: LoopKind,
}

impl Default for DashCamSection {
    fn default() -> Self {
        DashCamSection {
            source: SourceKind::Catalog,
            catalog_dir: None,
            service_addr: None,
            download: DownloadKind::Simulated,
            simulated_download_ms: 350,
            enqueue_overhead_ms: 500,
            loop_mode: LoopKind::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Video length; also the default spacing between pair downloads.
    pub granularity_ms: u64,
    pub inter_pair_wait_ms: Option<u64>,
    /// Pairs to download before finishing.
    pub pairs: usize,
    pub segmentation: bool,
    pub segment_count: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { granularity_ms: 1000, inter_pair_wait_ms: None, pairs: 1, segmentation: false, segment_count: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasterConfig {
    pub name: String,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub expected_workers: usize,
    /// How long to wait for the expected workers to connect.
    #[serde(default = "default_worker_wait_ms")]
    pub worker_wait_ms: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    pub hardware: HardwareSection,
    #[serde(default)]
    pub dashcam: DashCamSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerConfig {
    pub name: String,
    pub master: String,
    #[serde(default = "default_connect_timeout_ms")]
    pub connect_timeout_ms: u64,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    pub hardware: HardwareSection,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_listen() -> String {
    "127.0.0.1:7700".into()
}

fn default_worker_wait_ms() -> u64 {
    30_000
}

fn default_connect_timeout_ms() -> u64 {
    10_000
}

fn default_chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}

fn check_name(name: &str) -> Result<(), ConfigError> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(ConfigError::Invalid(format!("node name `{name}` must be non-empty without whitespace")));
    }
    Ok(())
}

fn check_chunk(chunk: usize) -> Result<(), ConfigError> {
    if chunk == 0 || chunk > crate::wire::MAX_FRAME_BODY as usize {
        return Err(ConfigError::Invalid(format!("chunk_size {chunk} out of range")));
    }
    Ok(())
}

impl MasterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_name(&self.name)?;
        check_chunk(self.chunk_size)?;
        self.hardware.resolve()?;
        self.analysis.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match self.dashcam.source {
            SourceKind::Catalog if self.dashcam.catalog_dir.is_none() => {
                return Err(ConfigError::Invalid("dashcam.catalog_dir is required for the catalog source".into()))
            }
            SourceKind::Service if self.dashcam.service_addr.is_none() => {
                return Err(ConfigError::Invalid("dashcam.service_addr is required for the service source".into()))
            }
            _ => {}
        }
        if self.run.granularity_ms == 0 {
            return Err(ConfigError::Invalid("run.granularity_ms must be positive".into()));
        }
        if self.run.segmentation && self.run.segment_count < 1 {
            return Err(ConfigError::Invalid("run.segment_count must be at least 1".into()));
        }
        Ok(())
    }

    /// One-second videos cannot absorb the service enqueue overhead, so they
    /// always use simulated downloads.
    pub fn download_mode(&self) -> DownloadMode {
        let d = &self.dashcam;
        match d.download {
            DownloadKind::Service if self.run.granularity_ms <= 1000 => {
                warn!("one-second granularity: using simulated downloads instead of the service enqueue path");
                DownloadMode::Simulated { delay_ms: d.simulated_download_ms }
            }
            DownloadKind::Service => DownloadMode::Service { enqueue_overhead_ms: d.enqueue_overhead_ms },
            DownloadKind::Simulated => DownloadMode::Simulated { delay_ms: d.simulated_download_ms },
        }
    }

    pub fn loop_mode(&self) -> LoopMode {
        match self.dashcam.loop_mode {
            LoopKind::Test => LoopMode::Test,
            LoopKind::Latest => LoopMode::Latest,
        }
    }

    pub fn inter_pair_wait_ms(&self) -> u64 {
        self.run.inter_pair_wait_ms.unwrap_or(self.run.granularity_ms)
    }

    pub fn policy(&self) -> SchedulePolicy {
        SchedulePolicy { segmentation: self.run.segmentation, segment_count: self.run.segment_count }
    }
}

impl WorkerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_name(&self.name)?;
        check_chunk(self.chunk_size)?;
        self.hardware.resolve()?;
        self.analysis.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::Override(format!("`{p}` is not a table in `{key}`")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses TOML text, applies overrides, and deserializes.
pub fn parse_with_overrides<T: DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

pub fn load<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_with_overrides(&text, overrides).map_err(|e| match e {
        ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_master(path: &Path, overrides: &[String]) -> Result<MasterConfig, ConfigError> {
    let cfg: MasterConfig = load(path, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_worker(path: &Path, overrides: &[String]) -> Result<WorkerConfig, ConfigError> {
    let cfg: WorkerConfig = load(path, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
