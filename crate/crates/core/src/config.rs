//! Experiment configuration: TOML in, fully validated before anything runs.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accounting::{CostScope, FP16_BYTES};
use crate::aggregation::{FedAvgWeighting, DEFAULT_TAU};
use crate::client::{AdapterLayout, OptimizerConfig, TrainSchedule};
use crate::error::{Error, Result};
use crate::lora::AdapterRole;
use crate::model::StyleGate;
use crate::synth::WorldSpec;

pub const DESK_PRESET: &str = include_str!("../presets/desk.toml");
pub const PAPER_PRESET: &str = include_str!("../presets/paper.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    #[serde(rename = "fedpisa")]
    FedPisa,
    #[serde(rename = "fedavg")]
    FedAvg,
    LocalOnly,
    /// A single federated adapter carries both identity and style.
    NoIdLora,
    /// A single private adapter carries both; nothing is transmitted.
    NoStyleLora,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FedPisa,
        Strategy::FedAvg,
        Strategy::LocalOnly,
        Strategy::NoIdLora,
        Strategy::NoStyleLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedPisa => "fedpisa",
            Strategy::FedAvg => "fedavg",
            Strategy::LocalOnly => "local_only",
            Strategy::NoIdLora => "no_id_lora",
            Strategy::NoStyleLora => "no_style_lora",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::FedPisa => "FedPisa",
            Strategy::FedAvg => "FedAvg",
            Strategy::LocalOnly => "LocalOnly",
            Strategy::NoIdLora => "NoIdLora",
            Strategy::NoStyleLora => "NoStyleLora",
        }
    }

    pub fn layout(self) -> AdapterLayout {
        match self {
            Strategy::FedPisa | Strategy::FedAvg | Strategy::LocalOnly => AdapterLayout::default(),
            Strategy::NoIdLora => AdapterLayout {
                timbre_target: AdapterRole::Style,
                style_target: AdapterRole::Style,
                gate: StyleGate::Always,
                uploads: true,
            },
            Strategy::NoStyleLora => AdapterLayout {
                timbre_target: AdapterRole::Identity,
                style_target: AdapterRole::Identity,
                gate: StyleGate::ExpressiveOnly,
                uploads: false,
            },
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm || st.label().to_ascii_lowercase() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

/// What the server compares when computing attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityBasis {
    /// The uploaded factors themselves.
    #[default]
    Absolute,
    /// Uploaded factors minus the factors the client installed this round.
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub participation_rate: f64,
    pub tau: f64,
    pub strategy: Strategy,
    pub similarity_basis: SimilarityBasis,
    pub fedavg_weighting: FedAvgWeighting,
    pub cost_scope: CostScope,
    pub bytes_per_param: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub world: WorldSpec,
    pub adapter: AdapterConfig,
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 50,
            participation_rate: 0.2,
            tau: DEFAULT_TAU,
            strategy: Strategy::FedPisa,
            similarity_basis: SimilarityBasis::Absolute,
            fedavg_weighting: FedAvgWeighting::Uniform,
            cost_scope: CostScope::Both,
            bytes_per_param: FP16_BYTES,
            output_dir: None,
            world: WorldSpec::default(),
            adapter: AdapterConfig::default(),
            schedule: TrainSchedule::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self::from_toml_str(DESK_PRESET).expect("desk preset is valid")
    }

    pub fn paper() -> Self {
        Self::from_toml_str(PAPER_PRESET).expect("paper preset is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parse `text`, apply `key=value` overrides (dotted keys address nested
    /// tables), then validate.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A copy with one more `key=value` override applied and revalidated.
    pub fn with_override(&self, ov: &str) -> Result<Self> {
        Self::from_toml_with_overrides(&self.to_toml_string(), &[ov.to_string()])
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::Config(format!(
                "participation_rate must be in (0, 1], got {}",
                self.participation_rate
            )));
        }
        if !(self.tau > 0.0) || self.tau.is_nan() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.adapter.rank == 0 || !(self.adapter.alpha > 0.0) {
            return Err(Error::Config("adapter rank must be >= 1 and alpha > 0".into()));
        }
        if self.bytes_per_param == 0 {
            return Err(Error::Config("bytes_per_param must be >= 1".into()));
        }
        Ok(())
    }

    /// Parameters in one style adapter (all sites).
    pub fn style_param_count(&self) -> usize {
        self.world.num_sites * self.adapter.rank * (self.world.d_in + self.world.d_out)
    }

    /// Set both the master seed and the world seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{ov}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override '{ov}' has an empty key segment")));
    }
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{ov}': '{seg}' is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
