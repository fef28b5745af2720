//! Per-user monitoring and optical path length compensation.
//!
//! Each user has its own [`UserSession`]. After every monitoring interval the
//! session's sifted rate and QBER are checked against [`Thresholds`]; a user
//! that stays below them for long enough is re-locked with [`compensate`],
//! which scans the delay lattice with click counts as the objective and then
//! centres the estimate on the detection window by balancing its two flanks.
//! Nothing here touches another user's session.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{scan_search, DelayLattice, DelayWindow, ScanError, TimingWord};
use crate::protocol::SiftedBlock;
use crate::schedule::UserId;

pub const HISTORY_LEN: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("user {user}: no signal above the noise floor after {evaluations} evaluations")]
    NoSignal { user: UserId, evaluations: usize },
    #[error("invalid thresholds: {0}")]
    BadThresholds(&'static str),
}

fn default_min_rate_fraction() -> f64 {
    0.9
}
fn default_max_qber() -> f64 {
    0.04
}
fn default_consecutive() -> u32 {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_min_rate_fraction")]
    pub min_rate_fraction: f64,
    #[serde(default = "default_max_qber")]
    pub max_qber: f64,
    #[serde(default = "default_consecutive")]
    pub consecutive_bad_blocks: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_rate_fraction: default_min_rate_fraction(),
            max_qber: default_max_qber(),
            consecutive_bad_blocks: default_consecutive(),
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.min_rate_fraction > 0.0 && self.min_rate_fraction <= 1.0) {
            return Err(ControllerError::BadThresholds("min_rate_fraction must lie in (0, 1]"));
        }
        if !(self.max_qber > 0.0 && self.max_qber < 0.5) {
            return Err(ControllerError::BadThresholds("max_qber must lie in (0, 0.5)"));
        }
        if self.consecutive_bad_blocks == 0 {
            return Err(ControllerError::BadThresholds("consecutive_bad_blocks must be at least 1"));
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}
fn default_budget_blocks() -> u32 {
    30
}
fn default_evals_per_block() -> u32 {
    10
}
fn default_floor_factor() -> f64 {
    3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Half width of the scan window around the last locked delay. Unset
    /// means the user's drift cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_ps: Option<i64>,
    #[serde(default = "default_budget_blocks")]
    pub budget_blocks: u32,
    /// Candidate words evaluated per block; each gets an equal share of it.
    #[serde(default = "default_evals_per_block")]
    pub evals_per_block: u32,
    /// Noise floor as a multiple of the expected dark clicks per evaluation.
    #[serde(default = "default_floor_factor")]
    pub noise_floor_factor: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            thresholds: Thresholds::default(),
            window_ps: None,
            budget_blocks: default_budget_blocks(),
            evals_per_block: default_evals_per_block(),
            noise_floor_factor: default_floor_factor(),
        }
    }
}

impl ControllerConfig {
    pub fn budget_evaluations(&self) -> usize {
        self.budget_blocks as usize * self.evals_per_block as usize
    }

    pub fn window_for(&self, drift_cap_ps: f64) -> i64 {
        self.window_ps.unwrap_or(drift_cap_ps.ceil() as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Tracking,
    Compensating,
    NoSignal,
}

impl SessionState {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Tracking => "tracking",
            SessionState::Compensating => "compensating",
            SessionState::NoSignal => "no_signal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub t_s: f64,
    pub rate_bps: f64,
    pub qber: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSession {
    pub user_id: UserId,
    pub word: TimingWord,
    pub expected_rate_bps: f64,
    pub history: VecDeque<MetricPoint>,
    pub state: SessionState,
    pub bad_streak: u32,
    pub compensations: u32,
}

impl UserSession {
    pub fn new(user_id: UserId, word: TimingWord, expected_rate_bps: f64) -> Self {
        Self {
            user_id,
            word,
            expected_rate_bps,
            history: VecDeque::with_capacity(HISTORY_LEN),
            state: SessionState::Tracking,
            bad_streak: 0,
            compensations: 0,
        }
    }

    fn record(&mut self, point: MetricPoint) {
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(point);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Ok,
    Recompensate,
}

/// Checks one monitoring interval. Intervals with no key-generating time
/// leave the streak untouched.
pub fn evaluate(session: &mut UserSession, block: &SiftedBlock, thresholds: &Thresholds) -> Decision {
    if session.state != SessionState::Tracking || block.duration_s <= 0.0 {
        return Decision::Ok;
    }
    let rate = block.sifted_count as f64 / block.duration_s;
    session.record(MetricPoint {
        t_s: block.duration_s,
        rate_bps: rate,
        qber: block.qber_estimate,
    });
    let low_rate = rate < thresholds.min_rate_fraction * session.expected_rate_bps;
    let high_qber = block.qber_estimate.is_some_and(|q| q > thresholds.max_qber);
    if low_rate || high_qber {
        session.bad_streak += 1;
    } else {
        session.bad_streak = 0;
    }
    if session.bad_streak >= thresholds.consecutive_bad_blocks {
        Decision::Recompensate
    } else {
        Decision::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub user: UserId,
    pub decision: Decision,
}

/// Evaluates every tracking session against its latest block.
pub fn controller_tick(sessions: &mut [UserSession], blocks: &[SiftedBlock], thresholds: &Thresholds) -> Vec<Action> {
    let mut actions = Vec::new();
    for session in sessions.iter_mut().filter(|s| s.state == SessionState::Tracking) {
        if let Some(block) = blocks.iter().find(|b| b.user_id == session.user_id) {
            actions.push(Action {
                user: session.user_id,
                decision: evaluate(session, block, thresholds),
            });
        }
    }
    actions
}

/// Measures clicks for one candidate word over one evaluation slot.
pub trait ClickProbe {
    fn probe(&mut self, word: TimingWord) -> u64;
    /// Length of one evaluation slot.
    fn slot_s(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compensation {
    pub user: UserId,
    pub old_word: TimingWord,
    pub new_word: TimingWord,
    /// Continuous estimate of the optimum delay.
    pub estimate_ps: f64,
    pub evaluations: usize,
    pub blocks: u32,
}

/// Shape of the click-count-vs-delay curve the refinement relies on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakShape {
    /// Half width of the (triangular) detection support.
    pub half_support_ps: f64,
    /// Score at or below which a probe is treated as noise.
    pub noise_floor: f64,
}

/// Re-locks `session` on a new optimum, scanning `window_ps` either side of
/// the current word.
///
/// On success the session returns to tracking with the new word and an
/// expected rate refreshed from the clicks seen at the peak. If the scan
/// finds no signal, or cannot be completed after one retry with a doubled
/// window, the session moves to `NoSignal`.
pub fn compensate<P: ClickProbe>(
    session: &mut UserSession,
    lattice: &DelayLattice,
    probe: &mut P,
    config: &ControllerConfig,
    window_ps: i64,
    shape: PeakShape,
) -> Result<Compensation, ControllerError> {
    session.state = SessionState::Compensating;
    let budget = config.budget_evaluations();
    let old_word = session.word;
    let center = lattice.delay_unchecked(old_word);

    let mut used = 0usize;
    let mut half_width = window_ps;
    let mut attempt = 0;
    let outcome = loop {
        let window = DelayWindow::around(center, half_width);
        let mut count = 0usize;
        let result = scan_search(
            lattice,
            |w| {
                count += 1;
                probe.probe(w) as f64
            },
            window,
            budget - used,
            shape.noise_floor,
        );
        used += count;
        attempt += 1;
        let at_edge = |d: i64| (d == window.lo_ps && window.lo_ps > 0) || d == window.hi_ps;
        match result {
            Ok(out) if !at_edge(out.delay_ps) || attempt > 1 => break Ok(out),
            Ok(_) | Err(ScanError::BudgetExceeded { .. }) if attempt == 1 => half_width *= 2,
            Err(ScanError::NoSignal { .. }) if attempt == 1 && used < budget => half_width *= 2,
            Ok(out) => break Ok(out),
            Err(e) => break Err(e),
        }
    };

    let no_signal = |session: &mut UserSession, evaluations| {
        session.state = SessionState::NoSignal;
        ControllerError::NoSignal {
            user: session.user_id,
            evaluations,
        }
    };
    let scan = match outcome {
        Ok(scan) => scan,
        Err(_) => return Err(no_signal(session, used)),
    };

    let refine = refine_peak(lattice, probe, scan.delay_ps as f64, shape, budget - used);
    used += refine.evaluations;
    // A lone noise spike can win the scan; the averaged peak cannot.
    if refine.peak_clicks.is_some_and(|p| p <= shape.noise_floor) {
        return Err(no_signal(session, used));
    }
    let estimate = refine.estimate_ps.max(0.0);
    let new_word = lattice.quantize(estimate).unwrap_or(scan.word);

    // Sifting keeps the matched-basis half of the clicks.
    let peak_clicks = refine.peak_clicks.unwrap_or(scan.score);
    session.expected_rate_bps = 0.5 * peak_clicks / probe.slot_s();
    session.word = new_word;
    session.state = SessionState::Tracking;
    session.bad_streak = 0;
    session.compensations += 1;

    let per_block = config.evals_per_block.max(1) as usize;
    Ok(Compensation {
        user: session.user_id,
        old_word,
        new_word,
        estimate_ps: estimate,
        evaluations: used,
        blocks: used.div_ceil(per_block) as u32,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub estimate_ps: f64,
    /// Mean clicks per evaluation at the final centre, if measured.
    pub peak_clicks: Option<f64>,
    pub evaluations: usize,
}

/// Centres a coarse peak estimate by balancing the two flanks.
///
/// On a symmetric peak with straight flanks, probes at `q - a`, `q` and
/// `q + a` give the offset of the true centre from `q` as
/// `a (R - L) / (2 (P - (L + R) / 2))`, independent of the peak height and
/// the background. Probing close to the edge of the support makes the
/// estimate sharper but needs a better starting point, so successive
/// rounds move the flank probes outward.
pub fn refine_peak<P: ClickProbe>(
    lattice: &DelayLattice,
    probe: &mut P,
    start_ps: f64,
    shape: PeakShape,
    budget: usize,
) -> Refinement {
    const ROUNDS: [(f64, f64); 3] = [(600.0, 0.15), (250.0, 0.25), (60.0, 0.6)];
    let fine = lattice.fine_step_ps as f64;
    let mut estimate = start_ps;
    let mut peak_clicks = None;
    let mut used = 0usize;

    for (margin, share) in ROUNDS {
        let n = ((budget as f64) * share).floor() as usize;
        // Flanks carry the position; the centre only scales, so probe it half as often.
        let reps = n * 2 / 5;
        if reps < 2 {
            break;
        }
        let a = ((shape.half_support_ps - margin) / fine).round() * fine;
        if a <= 0.0 {
            break;
        }
        let Ok(center) = lattice.quantize(estimate.max(0.0)) else {
            break;
        };
        let q = lattice.delay_unchecked(center) as f64;
        if q - a < 0.0 {
            break;
        }
        let (Ok(left), Ok(right)) = (lattice.quantize(q - a), lattice.quantize(q + a)) else {
            break;
        };

        let (mut l, mut p, mut r, mut np) = (0u64, 0u64, 0u64, 0usize);
        for i in 0..reps {
            l += probe.probe(left);
            r += probe.probe(right);
            if i % 2 == 0 {
                p += probe.probe(center);
                np += 1;
            }
        }
        used += 2 * reps + np;
        let (l, p, r) = (l as f64 / reps as f64, p as f64 / np as f64, r as f64 / reps as f64);
        let rise = p - (l + r) / 2.0;
        peak_clicks = Some(p);
        if rise <= shape.noise_floor.max(0.0) {
            break;
        }
        let offset = (a * (r - l) / (2.0 * rise)).clamp(-margin, margin);
        estimate = q + offset;
    }

    Refinement {
        estimate_ps: estimate,
        peak_clicks,
        evaluations: used,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn block(user: UserId, sifted: u64, qber: Option<f64>) -> SiftedBlock {
        SiftedBlock {
            user_id: user,
            block_id: 0,
            bits: Vec::new(),
            sifted_count: sifted,
            sampled: 0,
            sample_errors: 0,
            qber_estimate: qber,
            duration_s: 1.0,
        }
    }

    /// Triangular click curve with Poisson noise, peak `height` per slot.
    struct TriangleProbe {
        lattice: DelayLattice,
        peak_ps: f64,
        height: f64,
        background: f64,
        half_support: f64,
        rng: Option<ChaCha8Rng>,
        calls: usize,
    }

    impl TriangleProbe {
        fn mean(&self, word: TimingWord) -> f64 {
            let d = self.lattice.delay_unchecked(word) as f64;
            self.height * (1.0 - (d - self.peak_ps).abs() / self.half_support).max(0.0) + self.background
        }
    }

    impl ClickProbe for TriangleProbe {
        fn probe(&mut self, word: TimingWord) -> u64 {
            self.calls += 1;
            let m = self.mean(word);
            match self.rng.as_mut() {
                Some(rng) if m > 0.0 => Poisson::new(m).unwrap().sample(rng) as u64,
                _ => m.round() as u64,
            }
        }
        fn slot_s(&self) -> f64 {
            0.01
        }
    }

    fn shape() -> PeakShape {
        PeakShape {
            half_support_ps: 2000.0,
            noise_floor: 3.0 * 1.3,
        }
    }

    #[test]
    fn evaluate_examples() {
        let t = Thresholds::default();
        let mut s = UserSession::new(1, TimingWord::default(), 2000.0);
        assert_eq!(evaluate(&mut s, &block(1, 2000, Some(0.02)), &t), Decision::Ok);

        let mut s = UserSession::new(1, TimingWord::default(), 2000.0);
        assert_eq!(evaluate(&mut s, &block(1, 0, None), &t), Decision::Ok);
        assert_eq!(evaluate(&mut s, &block(1, 0, None), &t), Decision::Recompensate);

        let mut s = UserSession::new(1, TimingWord::default(), 2000.0);
        assert_eq!(evaluate(&mut s, &block(1, 0, None), &t), Decision::Ok);
        assert_eq!(evaluate(&mut s, &block(1, 2000, Some(0.01)), &t), Decision::Ok);
        assert_eq!(evaluate(&mut s, &block(1, 0, None), &t), Decision::Ok);

        let mut s = UserSession::new(1, TimingWord::default(), 2000.0);
        evaluate(&mut s, &block(1, 2000, Some(0.09)), &t);
        assert_eq!(evaluate(&mut s, &block(1, 2000, Some(0.09)), &t), Decision::Recompensate);
    }

    #[test]
    fn tick_examples() {
        let t = Thresholds::default();
        assert!(controller_tick(&mut [], &[], &t).is_empty());

        let mut sessions: Vec<UserSession> =
            (1..=4).map(|u| UserSession::new(u, TimingWord::default(), 2000.0)).collect();
        let nominal: Vec<SiftedBlock> = (1..=4).map(|u| block(u, 2000, Some(0.02))).collect();
        let actions = controller_tick(&mut sessions, &nominal, &t);
        assert_eq!(actions.len(), 4);
        assert!(actions.iter().all(|a| a.decision == Decision::Ok));

        let drifted: Vec<SiftedBlock> = (1..=4)
            .map(|u| if u == 2 { block(u, 300, Some(0.05)) } else { block(u, 2000, Some(0.02)) })
            .collect();
        controller_tick(&mut sessions, &drifted, &t);
        let actions = controller_tick(&mut sessions, &drifted, &t);
        let triggered: Vec<UserId> = actions
            .iter()
            .filter(|a| a.decision == Decision::Recompensate)
            .map(|a| a.user)
            .collect();
        assert_eq!(triggered, vec![2]);
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::default().validate().is_ok());
        let bad = Thresholds {
            max_qber: 0.5,
            ..Thresholds::default()
        };
        assert!(bad.validate().is_err());
        let bad = Thresholds {
            min_rate_fraction: 0.0,
            ..Thresholds::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_drift_keeps_the_word() {
        let lattice = DelayLattice::default();
        let word = TimingWord::new(150, 7);
        let mut probe = TriangleProbe {
            lattice,
            peak_ps: lattice.delay_unchecked(word) as f64,
            height: 1000.0,
            background: 0.0,
            half_support: 2000.0,
            rng: None,
            calls: 0,
        };
        let mut s = UserSession::new(1, word, 1.0);
        let out = compensate(&mut s, &lattice, &mut probe, &ControllerConfig::default(), 20_000, shape()).unwrap();
        assert_eq!(out.new_word, lattice.quantize(lattice.delay_unchecked(word) as f64).unwrap());
        assert_eq!(lattice.delay_unchecked(s.word), lattice.delay_unchecked(word));
        assert_eq!(s.state, SessionState::Tracking);
        assert!(out.blocks <= 30);
    }

    #[test]
    fn noisy_step_recovers_within_quantization() {
        let lattice = DelayLattice::default();
        let config = ControllerConfig::default();
        for seed in 0..20u64 {
            let start = TimingWord::new(200, 0);
            let new_peak = lattice.delay_unchecked(start) as f64 + 10_000.0;
            let mut probe = TriangleProbe {
                lattice,
                peak_ps: new_peak,
                height: 45.0,
                background: 1.3,
                half_support: 2000.0,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
                calls: 0,
            };
            let mut s = UserSession::new(1, start, 1.0);
            let out = compensate(&mut s, &lattice, &mut probe, &config, 20_000, shape()).unwrap();
            let err = (lattice.delay_unchecked(out.new_word) as f64 - new_peak).abs();
            assert!(err <= 25.0, "seed {seed}: error {err} ps, estimate {}", out.estimate_ps);
            assert!(out.blocks <= 30, "{} blocks", out.blocks);
            assert_eq!(probe.calls, out.evaluations);
        }
    }

    #[test]
    fn fiber_cut_means_no_signal() {
        let lattice = DelayLattice::default();
        let mut probe = TriangleProbe {
            lattice,
            peak_ps: 0.0,
            height: 0.0,
            background: 0.0,
            half_support: 2000.0,
            rng: None,
            calls: 0,
        };
        let mut s = UserSession::new(3, TimingWord::new(100, 0), 1.0);
        let err = compensate(&mut s, &lattice, &mut probe, &ControllerConfig::default(), 20_000, shape()).unwrap_err();
        assert!(matches!(err, ControllerError::NoSignal { user: 3, .. }));
        assert_eq!(s.state, SessionState::NoSignal);
        assert!(probe.calls <= ControllerConfig::default().budget_evaluations());
    }

    #[test]
    fn dark_noise_alone_is_not_a_peak() {
        let lattice = DelayLattice::default();
        for seed in 0..10u64 {
            let mut probe = TriangleProbe {
                lattice,
                peak_ps: 0.0,
                height: 0.0,
                background: 1.3,
                half_support: 2000.0,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
                calls: 0,
            };
            let mut s = UserSession::new(2, TimingWord::new(300, 0), 1.0);
            let res = compensate(&mut s, &lattice, &mut probe, &ControllerConfig::default(), 40_000, shape());
            assert!(matches!(res, Err(ControllerError::NoSignal { .. })), "seed {seed}: {res:?}");
        }
    }

    #[test]
    fn peak_outside_window_retries_wider() {
        let lattice = DelayLattice::default();
        let start = TimingWord::new(100, 0);
        let peak = lattice.delay_unchecked(start) as f64 + 27_000.0;
        let mut probe = TriangleProbe {
            lattice,
            peak_ps: peak,
            height: 1000.0,
            background: 0.0,
            half_support: 2000.0,
            rng: None,
            calls: 0,
        };
        let mut s = UserSession::new(1, start, 1.0);
        let out = compensate(&mut s, &lattice, &mut probe, &ControllerConfig::default(), 20_000, shape()).unwrap();
        assert_eq!(lattice.delay_unchecked(out.new_word) as f64, peak);
    }
}
