use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::lattice::DelayLattice;
use crate::optics::{DetectorParams, DriftParams, FiberChannel, DEFAULT_MAX_DB_PER_KM};
use crate::schedule::{channel_entry, UserId, MAX_USERS};

/// Above this many gates a per-pulse run is refused.
pub const PER_PULSE_GATE_LIMIT: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid `{path}`: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    pub fn invalid(path: impl Into<String>, message: impl ToString) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn path(&self) -> &str {
        match self {
            ConfigError::Io { path, .. } | ConfigError::Schema { path, .. } | ConfigError::Invalid { path, .. } => path,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Block,
    PerPulse,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub id: UserId,
    /// Channel-plan slot (wavelength and polarization); defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<UserId>,
    pub fiber: FiberChannel,
    #[serde(default)]
    pub drift: DriftParams,
    #[serde(default = "default_true")]
    pub active: bool,
    /// Error in the initial timing calibration.
    #[serde(default)]
    pub timing_offset_ps: f64,
}

impl UserConfig {
    pub fn channel(&self) -> UserId {
        self.channel.unwrap_or(self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioEvent {
    UserJoin {
        time_s: f64,
        user: UserId,
    },
    UserLeave {
        time_s: f64,
        user: UserId,
    },
    StepDrift {
        time_s: f64,
        user: UserId,
        ps: f64,
    },
    SetThreshold {
        time_s: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_rate_fraction: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_qber: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        consecutive_bad_blocks: Option<u32>,
    },
    FiberCut {
        time_s: f64,
        user: UserId,
    },
}

impl ScenarioEvent {
    pub fn time_s(&self) -> f64 {
        match self {
            ScenarioEvent::UserJoin { time_s, .. }
            | ScenarioEvent::UserLeave { time_s, .. }
            | ScenarioEvent::StepDrift { time_s, .. }
            | ScenarioEvent::SetThreshold { time_s, .. }
            | ScenarioEvent::FiberCut { time_s, .. } => *time_s,
        }
    }

    pub fn user(&self) -> Option<UserId> {
        match self {
            ScenarioEvent::UserJoin { user, .. }
            | ScenarioEvent::UserLeave { user, .. }
            | ScenarioEvent::StepDrift { user, .. }
            | ScenarioEvent::FiberCut { user, .. } => Some(*user),
            ScenarioEvent::SetThreshold { .. } => None,
        }
    }
}

fn default_name() -> String {
    "custom".into()
}
fn default_f_max() -> f64 {
    10e6
}
fn default_block() -> f64 {
    0.1
}
fn default_monitor_blocks() -> u32 {
    10
}
fn default_one() -> f64 {
    1.0
}
fn default_mu() -> f64 {
    0.6
}
fn default_server_loss() -> f64 {
    5.8
}
fn default_suppression() -> f64 {
    20.0
}
fn default_pulse_width() -> f64 {
    2000.0
}
fn default_sample_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_f_max")]
    pub f_max_hz: f64,
    #[serde(default = "default_block")]
    pub block_s: f64,
    /// Blocks per controller monitoring interval.
    #[serde(default = "default_monitor_blocks")]
    pub monitor_blocks: u32,
    #[serde(default)]
    pub mode: Mode,
    /// Fraction of owned gates carrying useful pulses.
    #[serde(default = "default_one")]
    pub duty: f64,
    #[serde(default = "default_mu")]
    pub mean_photons: f64,
    /// Loss inside the server between the quantum channel and the detectors.
    #[serde(default = "default_server_loss")]
    pub server_loss_db: f64,
    #[serde(default = "default_suppression")]
    pub crosstalk_suppression_db: f64,
    #[serde(default = "default_pulse_width")]
    pub pulse_width_ps: f64,
    #[serde(default)]
    pub detector: DetectorParams,
    #[serde(default)]
    pub lattice: DelayLattice,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default = "default_sample_fraction")]
    pub qber_sample_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_map: Option<Vec<UserId>>,
    #[serde(default = "default_one")]
    pub metrics_interval_s: f64,
    pub users: Vec<UserConfig>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

impl SimConfig {
    pub fn gates_per_block(&self) -> u64 {
        (self.f_max_hz * self.block_s).round() as u64
    }

    pub fn n_blocks(&self) -> u64 {
        (self.duration_s / self.block_s).round() as u64
    }

    pub fn metrics_blocks(&self) -> u64 {
        ((self.metrics_interval_s / self.block_s).round() as u64).max(1)
    }

    pub fn gate_period_ps(&self) -> f64 {
        1e12 / self.f_max_hz
    }

    pub fn user(&self, id: UserId) -> Option<&UserConfig> {
        self.users.iter().find(|u| u.id == id)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::invalid(path, format!("must be positive, got {v}")))
            }
        };
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(ConfigError::invalid("duration_s", "must be a finite non-negative number"));
        }
        positive("f_max_hz", self.f_max_hz)?;
        positive("block_s", self.block_s)?;
        positive("metrics_interval_s", self.metrics_interval_s)?;
        if self.gates_per_block() == 0 {
            return Err(ConfigError::invalid("block_s", "a block must contain at least one gate"));
        }
        if self.monitor_blocks == 0 {
            return Err(ConfigError::invalid("monitor_blocks", "must be at least 1"));
        }
        if !(self.duty > 0.0 && self.duty <= 1.0) {
            return Err(ConfigError::invalid("duty", "must lie in (0, 1]"));
        }
        if !(self.mean_photons >= 0.0) {
            return Err(ConfigError::invalid("mean_photons", "must be non-negative"));
        }
        if !(self.server_loss_db >= 0.0) {
            return Err(ConfigError::invalid("server_loss_db", "must be non-negative"));
        }
        if !(self.crosstalk_suppression_db >= 0.0) {
            return Err(ConfigError::invalid("crosstalk_suppression_db", "must be non-negative"));
        }
        positive("pulse_width_ps", self.pulse_width_ps)?;
        if !(0.0..1.0).contains(&self.qber_sample_fraction) {
            return Err(ConfigError::invalid("qber_sample_fraction", "must lie in [0, 1)"));
        }
        self.detector.validate().map_err(|e| ConfigError::invalid("detector", e))?;
        self.lattice.validate().map_err(|e| ConfigError::invalid("lattice", e))?;
        self.controller
            .thresholds
            .validate()
            .map_err(|e| ConfigError::invalid("controller.thresholds", e))?;
        if self.controller.evals_per_block == 0 || self.controller.budget_blocks == 0 {
            return Err(ConfigError::invalid("controller", "budget and evaluations per block must be positive"));
        }
        if self.controller.window_ps.is_some_and(|w| w <= 0) {
            return Err(ConfigError::invalid("controller.window_ps", "must be positive"));
        }
        if self.mode == Mode::PerPulse && self.duration_s * self.f_max_hz > PER_PULSE_GATE_LIMIT {
            return Err(ConfigError::invalid(
                "mode",
                format!(
                    "per_pulse would simulate {:.3e} gates, above the limit of {PER_PULSE_GATE_LIMIT:e}",
                    self.duration_s * self.f_max_hz
                ),
            ));
        }

        if self.users.is_empty() {
            return Err(ConfigError::invalid("users", "at least one user is required"));
        }
        if self.users.len() > MAX_USERS {
            return Err(ConfigError::invalid("users", format!("at most {MAX_USERS} users are supported")));
        }
        let mut ids = BTreeSet::new();
        let mut channels = BTreeSet::new();
        for (i, u) in self.users.iter().enumerate() {
            let at = |field: &str| format!("users[{i}].{field}");
            if u.id == 0 {
                return Err(ConfigError::invalid(at("id"), "ids start at 1"));
            }
            if !ids.insert(u.id) {
                return Err(ConfigError::invalid(at("id"), format!("duplicate id {}", u.id)));
            }
            channel_entry(u.channel()).map_err(|e| ConfigError::invalid(at("channel"), e))?;
            if !channels.insert(u.channel()) {
                return Err(ConfigError::invalid(at("channel"), format!("channel {} used twice", u.channel())));
            }
            u.fiber
                .validate(DEFAULT_MAX_DB_PER_KM)
                .map_err(|e| ConfigError::invalid(at("fiber"), e))?;
            u.drift.validate().map_err(|e| ConfigError::invalid(at("drift"), e))?;
            if !u.timing_offset_ps.is_finite() {
                return Err(ConfigError::invalid(at("timing_offset_ps"), "must be finite"));
            }
        }
        if let Some(map) = &self.slot_map {
            let initial: BTreeSet<UserId> = self.users.iter().filter(|u| u.active).map(|u| u.id).collect();
            let mapped: BTreeSet<UserId> = map.iter().copied().collect();
            if mapped.len() != map.len() || mapped != initial {
                return Err(ConfigError::invalid("slot_map", "must list every initially active user once"));
            }
        }

        let mut last = 0.0;
        for (i, e) in self.events.iter().enumerate() {
            let t = e.time_s();
            if !(t >= last) {
                return Err(ConfigError::invalid(format!("events[{i}].time_s"), "event times must be nondecreasing"));
            }
            if t > self.duration_s {
                return Err(ConfigError::invalid(format!("events[{i}].time_s"), "event lies after the end of the run"));
            }
            last = t;
            if let Some(user) = e.user() {
                if !ids.contains(&user) {
                    return Err(ConfigError::invalid(format!("events[{i}].user"), format!("unknown user {user}")));
                }
            }
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    SimConfig::from_json(&text)
}
