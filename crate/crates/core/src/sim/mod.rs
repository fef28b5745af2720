//! Simulated timeline tying the optics, schedule, protocol and controller
//! together, plus scenario configuration and metrics output.

mod config;
mod engine;
mod metrics;
mod presets;

pub use config::{load_config, ConfigError, Mode, ScenarioEvent, SimConfig, UserConfig, PER_PULSE_GATE_LIMIT};
pub use engine::{nominal_rate_bps, run, DetectionBlock, Engine, GateModel, Membership, SimError};
pub use metrics::{
    summarize_jsonl, summary_csv, EventRecord, KeyEntry, KeyFile, KeyPair, MetricRecord, MetricsSeries, UserSummary,
};
pub use presets::{calibrate_duty, field_metro, lab_25km, preset, FIELD_USER1_RATE_BPS, PRESET_NAMES};
