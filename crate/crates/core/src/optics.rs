//! Fiber channels, path-delay drift and gated single-photon detection.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum, km per picosecond.
pub const C_KM_PER_PS: f64 = 2.997_924_58e-7;
pub const DEFAULT_GROUP_INDEX: f64 = 1.468;
pub const DEFAULT_MAX_DB_PER_KM: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("fiber length {0} km is negative")]
    NegativeLength(f64),
    #[error("fiber loss {0} dB is negative")]
    NegativeLoss(f64),
    #[error("fiber loss {per_km:.3} dB/km exceeds the sanity bound {bound} dB/km")]
    LossTooHigh { per_km: f64, bound: f64 },
    #[error("group index {0} must be at least 1")]
    BadGroupIndex(f64),
    #[error("{field} = {value} is outside [0, 1]")]
    NotProbability { field: &'static str, value: f64 },
    #[error("{field} = {value} must be positive")]
    NotPositive { field: &'static str, value: f64 },
}

fn default_group_index() -> f64 {
    DEFAULT_GROUP_INDEX
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberChannel {
    pub length_km: f64,
    /// One-way quantum-channel loss.
    pub loss_db: f64,
    #[serde(default = "default_group_index")]
    pub group_index: f64,
    #[serde(default)]
    pub storage_line_ps: f64,
}

impl FiberChannel {
    pub fn new(length_km: f64, loss_db: f64) -> Self {
        Self {
            length_km,
            loss_db,
            group_index: DEFAULT_GROUP_INDEX,
            storage_line_ps: 0.0,
        }
    }

    pub fn validate(&self, max_db_per_km: f64) -> Result<(), OpticsError> {
        if !(self.length_km >= 0.0) {
            return Err(OpticsError::NegativeLength(self.length_km));
        }
        if !(self.loss_db >= 0.0) {
            return Err(OpticsError::NegativeLoss(self.loss_db));
        }
        if !(self.group_index >= 1.0) {
            return Err(OpticsError::BadGroupIndex(self.group_index));
        }
        if self.length_km > 0.0 {
            let per_km = self.loss_db / self.length_km;
            if per_km > max_db_per_km {
                return Err(OpticsError::LossTooHigh {
                    per_km,
                    bound: max_db_per_km,
                });
            }
        }
        Ok(())
    }

    /// Round trip through the fiber and the user's storage line, without drift.
    pub fn static_round_trip_ps(&self) -> f64 {
        2.0 * self.length_km * self.group_index / C_KM_PER_PS + self.storage_line_ps
    }
}

/// Slow sinusoid (daily temperature cycle) plus a bounded random walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftParams {
    #[serde(default)]
    pub amplitude_ps: f64,
    #[serde(default = "default_period")]
    pub period_s: f64,
    #[serde(default)]
    pub phase_rad: f64,
    /// Standard deviation of one random-walk step (one step per block).
    #[serde(default)]
    pub walk_sigma_ps: f64,
    /// Bound on the magnitude of the total offset.
    #[serde(default = "default_cap")]
    pub cap_ps: f64,
}

fn default_period() -> f64 {
    86_400.0
}

fn default_cap() -> f64 {
    40_000.0
}

impl Default for DriftParams {
    fn default() -> Self {
        Self {
            amplitude_ps: 0.0,
            period_s: default_period(),
            phase_rad: 0.0,
            walk_sigma_ps: 0.0,
            cap_ps: default_cap(),
        }
    }
}

impl DriftParams {
    pub fn validate(&self) -> Result<(), OpticsError> {
        if !(self.period_s > 0.0) {
            return Err(OpticsError::NotPositive {
                field: "period_s",
                value: self.period_s,
            });
        }
        if !(self.walk_sigma_ps >= 0.0) || !(self.amplitude_ps >= 0.0) {
            return Err(OpticsError::NotPositive {
                field: "walk_sigma_ps/amplitude_ps",
                value: self.walk_sigma_ps.min(self.amplitude_ps),
            });
        }
        if !(self.cap_ps > 0.0) {
            return Err(OpticsError::NotPositive {
                field: "cap_ps",
                value: self.cap_ps,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftState {
    pub params: DriftParams,
    walk_ps: f64,
    step_ps: f64,
}

impl DriftState {
    pub fn new(params: DriftParams) -> Self {
        Self {
            params,
            walk_ps: 0.0,
            step_ps: 0.0,
        }
    }

    /// Advances the random walk by one evaluation block.
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let sigma = self.params.walk_sigma_ps;
        if sigma > 0.0 {
            let step = Normal::new(0.0, sigma).expect("sigma is finite and positive").sample(rng);
            let cap = self.params.cap_ps;
            self.walk_ps = (self.walk_ps + step).clamp(-cap, cap);
        }
    }

    /// Adds a permanent step to the path delay.
    pub fn inject_step(&mut self, ps: f64) {
        self.step_ps += ps;
    }

    pub fn walk_ps(&self) -> f64 {
        self.walk_ps
    }

    pub fn offset_at(&self, t_s: f64) -> f64 {
        let p = &self.params;
        let sinus = p.amplitude_ps * (std::f64::consts::TAU * t_s / p.period_s + p.phase_rad).sin();
        (sinus + self.walk_ps + self.step_ps).clamp(-p.cap_ps, p.cap_ps)
    }
}

pub fn drift(state: &DriftState, t_s: f64) -> f64 {
    state.offset_at(t_s)
}

pub fn round_trip_delay(channel: &FiberChannel, state: &DriftState, t_s: f64) -> f64 {
    channel.static_round_trip_ps() + drift(state, t_s)
}

pub fn transmittance(total_loss_db: f64) -> f64 {
    10f64.powf(-total_loss_db / 10.0)
}

fn default_efficiency() -> f64 {
    0.15
}
fn default_dark() -> f64 {
    5000.0
}
fn default_gate_freq() -> f64 {
    10e6
}
fn default_gate_width() -> f64 {
    2000.0
}
fn default_visibility() -> f64 {
    0.99
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    #[serde(default = "default_efficiency")]
    pub efficiency: f64,
    /// Dark counts per second summed over both detectors.
    #[serde(default = "default_dark")]
    pub dark_cps_total: f64,
    #[serde(default = "default_gate_freq")]
    pub gate_freq_hz: f64,
    #[serde(default = "default_gate_width")]
    pub gate_width_ps: f64,
    #[serde(default = "default_visibility")]
    pub visibility: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            efficiency: default_efficiency(),
            dark_cps_total: default_dark(),
            gate_freq_hz: default_gate_freq(),
            gate_width_ps: default_gate_width(),
            visibility: default_visibility(),
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), OpticsError> {
        for (field, value) in [("efficiency", self.efficiency), ("visibility", self.visibility)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(OpticsError::NotProbability { field, value });
            }
        }
        if !(self.dark_cps_total >= 0.0) {
            return Err(OpticsError::NotPositive {
                field: "dark_cps_total",
                value: self.dark_cps_total,
            });
        }
        for (field, value) in [("gate_freq_hz", self.gate_freq_hz), ("gate_width_ps", self.gate_width_ps)] {
            if !(value > 0.0) {
                return Err(OpticsError::NotPositive { field, value });
            }
        }
        Ok(())
    }

    /// Dark-click probability of one detector in one gate.
    pub fn dark_per_detector(&self) -> f64 {
        (self.dark_cps_total / 2.0 / self.gate_freq_hz).min(1.0)
    }

    /// Probability that at least one detector dark-clicks in a gate.
    pub fn dark_total(&self) -> f64 {
        let d = self.dark_per_detector();
        1.0 - (1.0 - d) * (1.0 - d)
    }
}

/// Click probabilities `(p_D0, p_D1)` for one gate.
pub fn gate_click_probabilities(mean_photons: f64, phase_diff: f64, params: &DetectorParams) -> (f64, f64) {
    gate_click_probabilities_with_background(mean_photons, 0.0, phase_diff, params)
}

/// As [`gate_click_probabilities`], with extra phase-random background photons
/// (crosstalk) that split evenly between the detectors.
pub fn gate_click_probabilities_with_background(
    mean_photons: f64,
    background_photons: f64,
    phase_diff: f64,
    params: &DetectorParams,
) -> (f64, f64) {
    let mu = mean_photons.max(0.0);
    let eta = params.efficiency;
    let to_d0 = (1.0 + params.visibility * phase_diff.cos()) / 2.0;
    let to_d1 = 1.0 - to_d0;
    let dark = params.dark_per_detector();
    let bg = 1.0 - (-background_photons.max(0.0) * eta / 2.0).exp();
    let detector = |share: f64| {
        let signal = 1.0 - (-mu * eta * share).exp();
        1.0 - (1.0 - signal) * (1.0 - bg) * (1.0 - dark)
    };
    (detector(to_d0), detector(to_d1))
}

/// Mean photons leaking into one gate from the other co-polarized channels.
pub fn crosstalk_background(other_channel_photons: &[f64], suppression_db: f64) -> f64 {
    if suppression_db.is_infinite() {
        return 0.0;
    }
    let leak = transmittance(suppression_db);
    other_channel_photons.iter().map(|mu| mu * leak).sum()
}

/// Fraction of a pulse that overlaps the detector gate when offset by `dt_ps`.
pub fn misalignment_acceptance(dt_ps: f64, pulse_width_ps: f64, gate_width_ps: f64) -> f64 {
    let half_support = (pulse_width_ps + gate_width_ps) / 2.0;
    (1.0 - dt_ps.abs() / half_support).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn noiseless() -> DetectorParams {
        DetectorParams {
            dark_cps_total: 0.0,
            visibility: 1.0,
            ..DetectorParams::default()
        }
    }

    #[test]
    fn round_trip_examples() {
        let still = DriftState::new(DriftParams::default());
        assert_eq!(round_trip_delay(&FiberChannel::new(0.0, 0.0), &still, 0.0), 0.0);
        let rtt = round_trip_delay(&FiberChannel::new(9.9, 2.23), &still, 100.0);
        let expect = 2.0 * 9.9 * 1.468 / 2.998e-7;
        assert!((rtt - expect).abs() / expect < 1e-3, "{rtt}");
        assert!((rtt - 96.9e6).abs() < 0.1e6);

        let peaked = DriftState::new(DriftParams {
            amplitude_ps: 750.0,
            period_s: 400.0,
            ..DriftParams::default()
        });
        let base = FiberChannel::new(1.0, 0.2).static_round_trip_ps();
        let at_peak = round_trip_delay(&FiberChannel::new(1.0, 0.2), &peaked, 100.0);
        assert!((at_peak - base - 750.0).abs() < 1e-6);
    }

    #[test]
    fn drift_zero_and_deterministic() {
        let mut still = DriftState::new(DriftParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for b in 0..100 {
            still.advance(&mut rng);
            assert_eq!(drift(&still, b as f64 * 0.1), 0.0);
        }
        let params = DriftParams {
            amplitude_ps: 1000.0,
            walk_sigma_ps: 5.0,
            ..DriftParams::default()
        };
        let trace = |seed| {
            let mut s = DriftState::new(params);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..1000)
                .map(|b| {
                    s.advance(&mut rng);
                    s.offset_at(b as f64 * 0.1)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(trace(9), trace(9));
        assert_ne!(trace(9), trace(10));
    }

    #[test]
    fn drift_respects_cap() {
        let mut s = DriftState::new(DriftParams {
            amplitude_ps: 100.0,
            walk_sigma_ps: 500.0,
            cap_ps: 1000.0,
            ..DriftParams::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in 0..10_000 {
            s.advance(&mut rng);
            assert!(s.offset_at(b as f64).abs() <= 1000.0);
        }
        s.inject_step(1e6);
        assert_eq!(s.offset_at(0.0), 1000.0);
    }

    #[test]
    fn transmittance_examples() {
        assert_eq!(transmittance(0.0), 1.0);
        assert!((transmittance(5.8 + 5.2) - 0.0794).abs() < 5e-5);
        assert!((transmittance(5.8 + 1.29) - 0.1955).abs() < 1e-4);
    }

    #[test]
    fn click_probability_examples() {
        assert_eq!(gate_click_probabilities(0.0, 0.0, &noiseless()), (0.0, 0.0));
        let (p0, p1) = gate_click_probabilities(0.6, 0.0, &noiseless());
        assert!(p0 > 0.0);
        assert_eq!(p1, 0.0);
        let mu = 0.6 * 0.1955;
        let (p0, p1) = gate_click_probabilities(mu, 0.0, &noiseless());
        assert!((p0 - (1.0 - (-0.6f64 * 0.15 * 0.1955).exp())).abs() < 1e-15);
        assert!((p0 - 0.01745).abs() < 1e-4, "{p0}");
        assert_eq!(p1, 0.0);
        let (q0, q1) = gate_click_probabilities(mu, PI, &noiseless());
        assert!(q0.abs() < 1e-15);
        assert!((q1 - p0).abs() < 1e-15);
    }

    #[test]
    fn dark_convention() {
        let d = DetectorParams::default();
        assert!((d.dark_per_detector() - 2.5e-4).abs() < 1e-15);
        assert!((d.dark_total() - 5e-4).abs() < 1e-7);
    }

    #[test]
    fn crosstalk_examples() {
        assert_eq!(crosstalk_background(&[], 20.0), 0.0);
        assert!((crosstalk_background(&[0.6], 20.0) - 0.006).abs() < 1e-15);
        assert_eq!(crosstalk_background(&[0.6, 0.6], f64::INFINITY), 0.0);
        assert!(crosstalk_background(&[0.6], 400.0) < 1e-30);
    }

    #[test]
    fn acceptance_examples() {
        assert_eq!(misalignment_acceptance(0.0, 2000.0, 2000.0), 1.0);
        assert_eq!(misalignment_acceptance(2000.0, 2000.0, 2000.0), 0.0);
        assert_eq!(misalignment_acceptance(1000.0, 2000.0, 2000.0), 0.5);
        assert_eq!(misalignment_acceptance(-1000.0, 2000.0, 2000.0), 0.5);
    }

    #[test]
    fn fiber_validation() {
        assert!(FiberChannel::new(5.8, 1.29).validate(DEFAULT_MAX_DB_PER_KM).is_ok());
        assert!(FiberChannel::new(-1.0, 0.0).validate(0.5).is_err());
        assert!(FiberChannel::new(1.0, -1.0).validate(0.5).is_err());
        assert!(FiberChannel::new(1.0, 2.0).validate(0.5).is_err());
    }

    proptest! {
        #[test]
        fn transmittance_is_multiplicative(a in 0.0f64..60.0, b in 0.0f64..60.0) {
            prop_assert!((transmittance(a + b) - transmittance(a) * transmittance(b)).abs() < 1e-12);
            if a < b {
                prop_assert!(transmittance(a) > transmittance(b));
            }
        }

        #[test]
        fn click_probabilities_are_probabilities(
            mu in 0.0f64..20.0,
            phi in -10.0f64..10.0,
            v in 0.0f64..=1.0,
            eta in 0.0f64..=1.0,
            dark in 0.0f64..1e6,
            bg in 0.0f64..1.0,
        ) {
            let p = DetectorParams { efficiency: eta, dark_cps_total: dark, visibility: v, ..DetectorParams::default() };
            let (p0, p1) = gate_click_probabilities_with_background(mu, bg, phi, &p);
            prop_assert!((0.0..=1.0).contains(&p0));
            prop_assert!((0.0..=1.0).contains(&p1));
        }

        #[test]
        fn perfect_interference_uses_one_detector(mu in 0.001f64..5.0, pi_phase in any::<bool>()) {
            let phi = if pi_phase { PI } else { 0.0 };
            let (p0, p1) = gate_click_probabilities(mu, phi, &noiseless());
            if pi_phase {
                prop_assert!(p0 < 1e-15 && p1 > 0.0);
            } else {
                prop_assert!(p1 == 0.0 && p0 > 0.0);
            }
        }

        #[test]
        fn acceptance_even_and_nonincreasing(a in 0.0f64..5000.0, b in 0.0f64..5000.0) {
            let f = |dt| misalignment_acceptance(dt, 2000.0, 2000.0);
            prop_assert_eq!(f(a), f(-a));
            if a <= b {
                prop_assert!(f(a) >= f(b));
            }
        }
    }
}
