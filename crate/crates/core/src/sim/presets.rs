//! Shipped scenarios: a four-user metropolitan field network and a
//! four-user laboratory testbed on spooled fiber.

use std::f64::consts::FRAC_PI_2;

use super::config::{SimConfig, UserConfig};
use super::engine::nominal_rate_bps;
use crate::controller::ControllerConfig;
use crate::lattice::DelayLattice;
use crate::optics::{DetectorParams, DriftParams, FiberChannel};

pub const PRESET_NAMES: [&str; 2] = ["field-metro", "lab-25km"];

/// Sifted rate user 1 of the field network is calibrated to.
pub const FIELD_USER1_RATE_BPS: f64 = 2300.0;

const HOUR: f64 = 3600.0;

fn user(id: u32, channel: u32, length_km: f64, loss_db: f64, drift: DriftParams) -> UserConfig {
    UserConfig {
        id,
        channel: (channel != id).then_some(channel),
        fiber: FiberChannel::new(length_km, loss_db),
        drift,
        active: true,
        timing_offset_ps: 0.0,
    }
}

fn sinus(amplitude_ps: f64, period_s: f64, phase_rad: f64, walk_sigma_ps: f64) -> DriftParams {
    DriftParams {
        amplitude_ps,
        period_s,
        phase_rad,
        walk_sigma_ps,
        ..DriftParams::default()
    }
}

fn base(name: &str, users: Vec<UserConfig>) -> SimConfig {
    SimConfig {
        name: name.into(),
        seed: 1,
        duration_s: 24.0 * HOUR,
        f_max_hz: 10e6,
        block_s: 0.1,
        monitor_blocks: 10,
        mode: Default::default(),
        duty: 1.0,
        mean_photons: 0.6,
        server_loss_db: 5.8,
        crosstalk_suppression_db: 20.0,
        pulse_width_ps: 2000.0,
        detector: DetectorParams::default(),
        lattice: DelayLattice::default(),
        controller: ControllerConfig::default(),
        qber_sample_fraction: 0.5,
        slot_map: None,
        metrics_interval_s: 60.0,
        users,
        events: Vec::new(),
    }
}

/// Duty that gives `user` the sifted rate `target_bps` with every
/// configured user active.
pub fn calibrate_duty(cfg: &SimConfig, user: u32, target_bps: f64) -> Option<f64> {
    let unit = SimConfig { duty: 1.0, ..cfg.clone() };
    let full = nominal_rate_bps(&unit, user, cfg.users.len())?;
    Some((target_bps / full).min(1.0))
}

pub fn field_metro() -> SimConfig {
    let mut cfg = base(
        "field-metro",
        vec![
            user(1, 1, 5.8, 1.29, sinus(4_200.0, 30.0 * HOUR, 0.0, 0.3)),
            user(2, 33, 9.9, 2.23, sinus(28_500.0, 24.0 * HOUR, 0.0, 0.5)),
            user(3, 2, 2.9, 1.14, sinus(3_600.0, 20.0 * HOUR, 0.0, 0.3)),
            user(4, 34, 7.7, 1.63, sinus(9_500.0, 24.0 * HOUR, 0.0, 0.4)),
        ],
    );
    cfg.duty = calibrate_duty(&cfg, 1, FIELD_USER1_RATE_BPS).expect("user 1 exists");
    cfg
}

pub fn lab_25km() -> SimConfig {
    let period = 400.0 * 60.0;
    let mut cfg = base(
        "lab-25km",
        vec![
            user(1, 1, 25.2, 5.2, sinus(4_000.0, period, -FRAC_PI_2, 0.3)),
            user(2, 2, 24.7, 5.2, sinus(4_400.0, period, -FRAC_PI_2, 0.3)),
            user(3, 3, 25.5, 5.2, sinus(4_800.0, period, -FRAC_PI_2, 0.3)),
            user(4, 4, 24.9, 5.2, sinus(5_200.0, period, -FRAC_PI_2, 0.3)),
        ],
    );
    // Same hardware as the field network, so the same duty.
    cfg.duty = field_metro().duty;
    cfg
}

pub fn preset(name: &str) -> Option<SimConfig> {
    match name {
        "field-metro" => Some(field_metro()),
        "lab-25km" => Some(lab_25km()),
        _ => None,
    }
}
