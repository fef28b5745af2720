use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Hypergeometric};
use serde::Serialize;
use thiserror::Error;

use super::config::{ConfigError, Mode, ScenarioEvent, SimConfig, UserConfig};
use super::metrics::{EventRecord, KeyPair, MetricRecord, MetricsSeries};
use crate::controller::{compensate, controller_tick, ClickProbe, Decision, PeakShape, Thresholds, UserSession};
use crate::lattice::{DelayLattice, TimingWord};
use crate::link::{InProcSifter, LinkError, Sifter};
use crate::optics::{
    gate_click_probabilities_with_background, misalignment_acceptance, transmittance, DetectorParams, DriftState,
};
use crate::protocol::{sample_gate, server_bases, user_records, Click, SiftedBlock};
use crate::rng::{stream, Role};
use crate::schedule::{channel_entry, fire_schedule, FireSchedule, Polarization, ScheduleError, UserId, MAX_USERS};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("link: {0}")]
    Link(#[from] LinkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    Join,
    Leave,
}

/// Per-gate detection model for one user at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateModel {
    /// Mean signal photons reaching the detectors inside the gate.
    pub signal_photons: f64,
    pub background_photons: f64,
    pub detector: DetectorParams,
}

impl GateModel {
    /// Click probabilities of the correct and the wrong detector when bases match.
    pub fn matched(&self) -> (f64, f64) {
        gate_click_probabilities_with_background(self.signal_photons, self.background_photons, 0.0, &self.detector)
    }

    pub fn mismatched_any(&self) -> f64 {
        let (a, b) =
            gate_click_probabilities_with_background(self.signal_photons, self.background_photons, FRAC_PI_2, &self.detector);
        1.0 - (1.0 - a) * (1.0 - b)
    }

    /// Probability that a matched-basis gate yields a single click.
    pub fn sift_probability(&self) -> f64 {
        let (c, w) = self.matched();
        c * (1.0 - w) + w * (1.0 - c)
    }

    /// Probability that a gate clicks at all, bases uniformly random.
    pub fn any_click(&self) -> f64 {
        let (c, w) = self.matched();
        0.5 * (1.0 - (1.0 - c) * (1.0 - w)) + 0.5 * self.mismatched_any()
    }
}

/// What one user's owned gates produced in one block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionBlock {
    pub user: UserId,
    pub block: u64,
    pub owned_gates: u64,
    pub used_gates: u64,
    pub timing_error_ps: f64,
    pub signal_photons: f64,
    pub sifted: u64,
    pub errors: u64,
    pub sampled: u64,
    pub sample_errors: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    sifted: u64,
    sampled: u64,
    sample_errors: u64,
    key_time_s: f64,
}

impl Tally {
    fn add(&mut self, d: &DetectionBlock, key_time_s: f64) {
        self.sifted += d.sifted;
        self.sampled += d.sampled;
        self.sample_errors += d.sample_errors;
        self.key_time_s += key_time_s;
    }

    fn rate(&self) -> f64 {
        if self.key_time_s > 0.0 {
            self.sifted as f64 / self.key_time_s
        } else {
            0.0
        }
    }

    fn qber(&self) -> Option<f64> {
        (self.sampled > 0).then(|| self.sample_errors as f64 / self.sampled as f64)
    }
}

#[derive(Debug, Clone)]
struct UserSim {
    cfg: UserConfig,
    polarization: Polarization,
    drift: DriftState,
    active: bool,
    cut: bool,
    /// Required fire delay with zero drift under the current schedule.
    base_ps: Option<f64>,
    /// First block in which the user generates key again after a scan.
    busy_until: u64,
    monitor: Tally,
    interval: Tally,
    seen_in_interval: bool,
    keys: KeyPair,
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
    }
}

/// Offset folded into `(-frame/2, frame/2]`.
fn fold(x: f64, frame: f64) -> f64 {
    x - frame * (x / frame).round()
}

/// The simulated network: schedule, per-user optics and drift, controller
/// sessions, and the metrics collected so far.
pub struct Engine<'s> {
    cfg: SimConfig,
    users: Vec<UserSim>,
    sessions: Vec<UserSession>,
    schedule: Option<FireSchedule>,
    thresholds: Thresholds,
    block: u64,
    next_event: usize,
    sifter: Option<&'s mut dyn Sifter>,
    series: MetricsSeries,
}

impl<'s> Engine<'s> {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        Self::build(cfg, None)
    }

    /// Per-pulse engine that sifts through `sifter`.
    pub fn with_sifter(cfg: SimConfig, sifter: &'s mut dyn Sifter) -> Result<Self, SimError> {
        Self::build(cfg, Some(sifter))
    }

    fn build(cfg: SimConfig, sifter: Option<&'s mut dyn Sifter>) -> Result<Self, SimError> {
        cfg.validate()?;
        let users = cfg
            .users
            .iter()
            .map(|u| {
                Ok(UserSim {
                    cfg: u.clone(),
                    polarization: channel_entry(u.channel())?.polarization,
                    drift: DriftState::new(u.drift),
                    active: u.active,
                    cut: false,
                    base_ps: None,
                    busy_until: 0,
                    monitor: Tally::default(),
                    interval: Tally::default(),
                    seen_in_interval: false,
                    keys: KeyPair::default(),
                })
            })
            .collect::<Result<Vec<_>, ScheduleError>>()?;
        let sessions = cfg.users.iter().map(|u| UserSession::new(u.id, TimingWord::default(), 0.0)).collect();
        let mut engine = Self {
            thresholds: cfg.controller.thresholds,
            cfg,
            users,
            sessions,
            schedule: None,
            block: 0,
            next_event: 0,
            sifter,
            series: MetricsSeries::default(),
        };
        engine.reschedule(0.0, true)?;
        if engine.cfg.mode == Mode::PerPulse {
            let active: Vec<UserId> = engine.users.iter().filter(|u| u.active).map(|u| u.cfg.id).collect();
            for id in active {
                engine.sifter_open(id)?;
            }
        }
        Ok(engine)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> Option<&FireSchedule> {
        self.schedule.as_ref()
    }

    pub fn series(&self) -> &MetricsSeries {
        &self.series
    }

    pub fn block_index(&self) -> u64 {
        self.block
    }

    pub fn session(&self, user: UserId) -> Option<&UserSession> {
        self.sessions.iter().find(|s| s.user_id == user)
    }

    pub fn active_users(&self) -> Vec<UserId> {
        self.users.iter().filter(|u| u.active).map(|u| u.cfg.id).collect()
    }

    fn index_of(&self, user: UserId) -> Result<usize, SimError> {
        self.users
            .iter()
            .position(|u| u.cfg.id == user)
            .ok_or(SimError::UnknownUser(user))
    }

    fn n_active(&self) -> usize {
        self.users.iter().filter(|u| u.active).count()
    }

    fn t_of(&self, block: u64) -> f64 {
        block as f64 * self.cfg.block_s
    }

    /// Delay the user's word must produce at time `t` for its pulse to land
    /// in the centre of its gate.
    pub fn required_delay_ps(&self, user: UserId, t_s: f64) -> Option<f64> {
        let u = &self.users[self.index_of(user).ok()?];
        Some(u.base_ps? - u.drift.offset_at(t_s))
    }

    /// Programmed minus required delay.
    pub fn timing_error_ps(&self, user: UserId, t_s: f64) -> Option<f64> {
        let i = self.index_of(user).ok()?;
        let word = self.sessions[i].word;
        Some(self.cfg.lattice.delay_unchecked(word) as f64 - self.required_delay_ps(user, t_s)?)
    }

    fn user_transmittance(&self, i: usize) -> f64 {
        if self.users[i].cut {
            0.0
        } else {
            transmittance(self.users[i].cfg.fiber.loss_db + self.cfg.server_loss_db)
        }
    }

    fn acceptance(&self, dt_ps: f64) -> f64 {
        misalignment_acceptance(dt_ps, self.cfg.pulse_width_ps, self.cfg.detector.gate_width_ps)
    }

    /// Detection model of every active user at time `t`, indexed like `users`.
    fn gate_models(&self, t_s: f64) -> Vec<Option<(GateModel, f64)>> {
        let Some(schedule) = &self.schedule else {
            return vec![None; self.users.len()];
        };
        let period = schedule.gate_period_ps;
        let frame = schedule.frame_ps();
        let lattice = &self.cfg.lattice;
        let dt: Vec<Option<f64>> = self
            .users
            .iter()
            .zip(&self.sessions)
            .map(|(u, s)| {
                let base = u.base_ps.filter(|_| u.active)?;
                Some(lattice.delay_unchecked(s.word) as f64 - (base - u.drift.offset_at(t_s)))
            })
            .collect();
        let leak = if self.cfg.crosstalk_suppression_db.is_infinite() {
            0.0
        } else {
            transmittance(self.cfg.crosstalk_suppression_db)
        };
        (0..self.users.len())
            .map(|i| {
                let dt_i = dt[i]?;
                let slot_i = schedule.slot_of(self.users[i].cfg.id)? as f64;
                let mut background = 0.0;
                for (j, u) in self.users.iter().enumerate() {
                    let (Some(dt_j), true) = (dt[j], j != i && u.polarization == self.users[i].polarization) else {
                        continue;
                    };
                    let Some(slot_j) = schedule.slot_of(u.cfg.id) else {
                        continue;
                    };
                    let offset = fold((slot_j as f64 - slot_i) * period + dt_j, frame);
                    background += self.cfg.mean_photons * self.user_transmittance(j) * leak * self.acceptance(offset);
                }
                let model = GateModel {
                    signal_photons: self.cfg.mean_photons * self.user_transmittance(i) * self.acceptance(dt_i),
                    background_photons: background,
                    detector: self.cfg.detector,
                };
                Some((model, dt_i))
            })
            .collect()
    }

    /// Sifted rate a perfectly aligned user should see with `n_active` users.
    pub fn nominal_rate_bps(&self, user: UserId, n_active: usize) -> Option<f64> {
        let i = self.index_of(user).ok()?;
        let model = GateModel {
            signal_photons: self.cfg.mean_photons * self.user_transmittance(i),
            background_photons: 0.0,
            detector: self.cfg.detector,
        };
        Some(self.cfg.duty * self.cfg.f_max_hz / n_active.max(1) as f64 * 0.5 * model.sift_probability())
    }

    fn rebuild_schedule(&self, initial: bool) -> Result<Option<FireSchedule>, SimError> {
        let active: Vec<(UserId, f64)> = self
            .users
            .iter()
            .filter(|u| u.active)
            .map(|u| (u.cfg.id, u.cfg.fiber.static_round_trip_ps()))
            .collect();
        if active.is_empty() {
            return Ok(None);
        }
        let map = if initial { self.cfg.slot_map.as_deref() } else { None };
        Ok(Some(fire_schedule(&active, self.cfg.gate_period_ps(), map)?))
    }

    /// Recomputes slots after a membership change. Users who stay keep their
    /// lock, shifted by the change in their slot offset; newcomers start from
    /// a calibrated word.
    fn reschedule(&mut self, t_s: f64, initial: bool) -> Result<(), SimError> {
        let n_before = self.users.iter().filter(|u| u.base_ps.is_some()).count();
        let schedule = self.rebuild_schedule(initial)?;
        let n_after = self.n_active();
        let lattice = self.cfg.lattice;
        for i in 0..self.users.len() {
            if !self.users[i].active {
                self.users[i].base_ps = None;
                continue;
            }
            let schedule = schedule.as_ref().expect("active users have a schedule");
            let a = schedule.assignment(self.users[i].cfg.id).expect("active users are scheduled");
            let frame = schedule.frame_ps();
            let base = frame + a.lead_ps.rem_euclid(frame);
            let id = self.users[i].cfg.id;
            match self.users[i].base_ps {
                Some(old) => {
                    let delay = lattice.delay_unchecked(self.sessions[i].word) as f64 + (base - old);
                    self.sessions[i].word = lattice.quantize(delay.max(0.0)).unwrap_or(self.sessions[i].word);
                    self.sessions[i].expected_rate_bps *= n_before as f64 / n_after as f64;
                }
                None => {
                    let target = base - self.users[i].drift.offset_at(t_s) + self.users[i].cfg.timing_offset_ps;
                    self.sessions[i] = UserSession::new(
                        id,
                        lattice.quantize(target.max(0.0)).unwrap_or_default(),
                        0.0,
                    );
                }
            }
            self.users[i].base_ps = Some(base);
        }
        self.schedule = schedule;
        for i in 0..self.users.len() {
            if self.users[i].active && self.sessions[i].expected_rate_bps == 0.0 {
                let id = self.users[i].cfg.id;
                self.sessions[i].expected_rate_bps = self.nominal_rate_bps(id, n_after).unwrap_or(0.0);
            }
        }
        Ok(())
    }

    fn sifter_open(&mut self, user: UserId) -> Result<(), SimError> {
        if let Some(s) = self.sifter.as_deref_mut() {
            s.open(user)?;
        }
        Ok(())
    }

    /// Adds or removes a user at time `t`; takes effect from the next block.
    pub fn membership_event(&mut self, change: Membership, user: UserId, t_s: f64) -> Result<(), SimError> {
        if change == Membership::Join && self.n_active() >= MAX_USERS {
            return Err(ScheduleError::TooManyUsers(MAX_USERS + 1).into());
        }
        let i = self.index_of(user)?;
        match change {
            Membership::Join if !self.users[i].active => {
                self.users[i].active = true;
                self.users[i].busy_until = self.block;
                self.reschedule(t_s, false)?;
                if self.cfg.mode == Mode::PerPulse {
                    self.sifter_open(user)?;
                }
                self.series.events.push(EventRecord::Join { t: t_s, user });
            }
            Membership::Leave if self.users[i].active => {
                self.users[i].active = false;
                self.reschedule(t_s, false)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn leave(&mut self, user: UserId, t_s: f64, reason: &str) -> Result<(), SimError> {
        self.membership_event(Membership::Leave, user, t_s)?;
        self.series.events.push(EventRecord::Leave {
            t: t_s,
            user,
            reason: reason.into(),
        });
        Ok(())
    }

    fn apply_events(&mut self) -> Result<(), SimError> {
        let now = self.t_of(self.block);
        while let Some(event) = self.cfg.events.get(self.next_event).cloned() {
            if event.time_s() > now + 1e-9 {
                break;
            }
            self.next_event += 1;
            match event {
                ScenarioEvent::UserJoin { user, .. } => self.membership_event(Membership::Join, user, now)?,
                ScenarioEvent::UserLeave { user, .. } => self.leave(user, now, "requested")?,
                ScenarioEvent::StepDrift { user, ps, .. } => {
                    let i = self.index_of(user)?;
                    self.users[i].drift.inject_step(ps);
                    self.series.events.push(EventRecord::StepDrift { t: now, user, ps });
                }
                ScenarioEvent::FiberCut { user, .. } => {
                    let i = self.index_of(user)?;
                    self.users[i].cut = true;
                    self.series.events.push(EventRecord::FiberCut { t: now, user });
                }
                ScenarioEvent::SetThreshold {
                    min_rate_fraction,
                    max_qber,
                    consecutive_bad_blocks,
                    ..
                } => {
                    let mut t = self.thresholds;
                    t.min_rate_fraction = min_rate_fraction.unwrap_or(t.min_rate_fraction);
                    t.max_qber = max_qber.unwrap_or(t.max_qber);
                    t.consecutive_bad_blocks = consecutive_bad_blocks.unwrap_or(t.consecutive_bad_blocks);
                    t.validate()
                        .map_err(|e| ConfigError::invalid(format!("events[{}]", self.next_event - 1), e))?;
                    self.thresholds = t;
                    self.series.events.push(EventRecord::SetThreshold {
                        t: now,
                        min_rate_fraction: t.min_rate_fraction,
                        max_qber: t.max_qber,
                        consecutive_bad_blocks: t.consecutive_bad_blocks,
                    });
                }
            }
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.block >= self.cfg.n_blocks()
    }

    /// Simulates the next block: scenario events due at its start, drift,
    /// detection for every user generating key, then monitoring and metrics
    /// at interval boundaries.
    pub fn step_block(&mut self) -> Result<Vec<DetectionBlock>, SimError> {
        let b = self.block;
        self.apply_events()?;
        let t = self.t_of(b);
        let seed = self.cfg.seed;
        if b > 0 {
            for u in self.users.iter_mut().filter(|u| u.busy_until <= b) {
                u.drift.advance(&mut stream(seed, Role::Drift, u.cfg.id, b));
            }
        }

        let models = self.gate_models(t);
        let gpb = self.cfg.gates_per_block();
        let gate_start = b * gpb;
        let mut out = Vec::new();
        #[allow(clippy::needless_range_loop)]
        for i in 0..self.users.len() {
            let (Some((model, dt)), true) = (models[i], self.users[i].busy_until <= b) else {
                continue;
            };
            let id = self.users[i].cfg.id;
            let owned = self.schedule.as_ref().map_or(0, |s| s.owned_gates_in(id, gate_start, gpb));
            let used = (self.cfg.duty * owned as f64).round() as u64;
            let mut d = DetectionBlock {
                user: id,
                block: b,
                owned_gates: owned,
                used_gates: used,
                timing_error_ps: dt,
                signal_photons: model.signal_photons,
                sifted: 0,
                errors: 0,
                sampled: 0,
                sample_errors: 0,
            };
            match self.cfg.mode {
                Mode::Block => self.detect_block(&mut d, &model),
                Mode::PerPulse => {
                    if !self.detect_per_pulse(i, &mut d, &model, t)? {
                        continue;
                    }
                }
            }
            let u = &mut self.users[i];
            u.monitor.add(&d, self.cfg.block_s);
            u.interval.add(&d, self.cfg.block_s);
            u.seen_in_interval = true;
            out.push(d);
        }

        self.block += 1;
        let end = self.t_of(self.block);
        if self.block.is_multiple_of(u64::from(self.cfg.monitor_blocks)) {
            self.monitor_tick(end)?;
        }
        if self.block.is_multiple_of(self.cfg.metrics_blocks()) || self.is_done() {
            self.emit_metrics(end);
        }
        Ok(out)
    }

    fn detect_block(&self, d: &mut DetectionBlock, model: &GateModel) {
        let seed = self.cfg.seed;
        let mut rng = stream(seed, Role::Optics, d.user, d.block);
        let (c, w) = model.matched();
        let p_right = c * (1.0 - w);
        let p_wrong = w * (1.0 - c);
        let matched = binomial(d.used_gates, 0.5, &mut rng);
        let right = binomial(matched, p_right, &mut rng);
        let wrong = if p_right < 1.0 {
            binomial(matched - right, p_wrong / (1.0 - p_right), &mut rng)
        } else {
            0
        };
        d.sifted = right + wrong;
        d.errors = wrong;
        let k = ((d.sifted as f64) * self.cfg.qber_sample_fraction).round() as u64;
        d.sampled = k.min(d.sifted);
        if d.sampled > 0 {
            let mut rng = stream(seed, Role::QberSample, d.user, d.block);
            d.sample_errors = Hypergeometric::new(d.sifted, d.errors, d.sampled)
                .expect("sample within population")
                .sample(&mut rng);
        }
    }

    /// Returns false if the block was lost to a disconnect.
    fn detect_per_pulse(&mut self, i: usize, d: &mut DetectionBlock, model: &GateModel, t: f64) -> Result<bool, SimError> {
        let seed = self.cfg.seed;
        let n = d.used_gates as usize;
        let records = user_records(seed, d.user, d.block, n);
        let bases = server_bases(seed, d.user, d.block, n);
        let mut rng = stream(seed, Role::Optics, d.user, d.block);
        let clicks: Vec<Click> = records
            .iter()
            .zip(&bases)
            .map(|(r, &sb)| sample_gate(r, sb, model.signal_photons, model.background_photons, &model.detector, &mut rng))
            .collect();
        for ((r, &sb), c) in records.iter().zip(&bases).zip(&clicks) {
            if r.basis == sb && matches!(c, Click::D0 | Click::D1) {
                let bit = u8::from(*c == Click::D1);
                d.errors += u64::from(bit != r.bit);
            }
        }
        let Some(sifter) = self.sifter.as_deref_mut() else {
            return Err(LinkError::ProtocolViolation("per-pulse mode without a sifter".into()).into());
        };
        match sifter.sift_block(d.user, d.block, &clicks, &bases) {
            Ok(pair) => {
                d.sifted = pair.server.sifted_count;
                d.sampled = pair.server.sampled;
                d.sample_errors = pair.server.sample_errors;
                let keys = &mut self.users[i].keys;
                keys.server.extend_from_slice(&pair.server.bits);
                if let Some(u) = pair.user {
                    keys.user.get_or_insert_with(Vec::new).extend_from_slice(&u.bits);
                }
                Ok(true)
            }
            Err(LinkError::Closed | LinkError::Timeout) => {
                log::warn!("user {} disconnected during block {}", d.user, d.block);
                self.leave(d.user, t, "disconnected")?;
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn monitor_tick(&mut self, t_end: f64) -> Result<(), SimError> {
        let mut blocks = Vec::new();
        for (u, s) in self.users.iter_mut().zip(&self.sessions) {
            if u.active {
                blocks.push(SiftedBlock {
                    user_id: s.user_id,
                    block_id: self.block - 1,
                    bits: Vec::new(),
                    sifted_count: u.monitor.sifted,
                    sampled: u.monitor.sampled,
                    sample_errors: u.monitor.sample_errors,
                    qber_estimate: u.monitor.qber(),
                    duration_s: u.monitor.key_time_s,
                });
            }
            u.monitor = Tally::default();
        }
        if !self.cfg.controller.enabled {
            return Ok(());
        }
        let actions = controller_tick(&mut self.sessions, &blocks, &self.thresholds);
        for action in actions.into_iter().filter(|a| a.decision == Decision::Recompensate) {
            self.compensate_user(action.user, t_end)?;
        }
        Ok(())
    }

    fn compensate_user(&mut self, user: UserId, t_trigger: f64) -> Result<(), SimError> {
        let i = self.index_of(user)?;
        let start = self.block;
        let Some(models) = self.gate_models(self.t_of(start)).get(i).copied().flatten() else {
            return Ok(());
        };
        let gpb = self.cfg.gates_per_block();
        let owned = self
            .schedule
            .as_ref()
            .map_or(0, |s| s.owned_gates_in(user, start * gpb, gpb));
        let evals = u64::from(self.cfg.controller.evals_per_block);
        let gates_per_eval = ((self.cfg.duty * owned as f64) / evals as f64).round() as u64;
        let shape = PeakShape {
            half_support_ps: (self.cfg.pulse_width_ps + self.cfg.detector.gate_width_ps) / 2.0,
            noise_floor: self.cfg.controller.noise_floor_factor * gates_per_eval as f64 * self.cfg.detector.dark_total(),
        };
        let window = self.cfg.controller.window_for(self.users[i].drift.params.cap_ps);
        let lattice = self.cfg.lattice;
        let controller = self.cfg.controller;
        let model = GateModel {
            signal_photons: self.cfg.mean_photons * self.user_transmittance(i),
            ..models.0
        };
        let base_ps = self.users[i].base_ps.unwrap_or(0.0);
        let mut probe = SimProbe {
            lattice,
            drift: &mut self.users[i].drift,
            base_ps,
            model,
            pulse_width_ps: self.cfg.pulse_width_ps,
            seed: self.cfg.seed,
            user,
            block: start,
            block_s: self.cfg.block_s,
            eval_in_block: 0,
            evals_per_block: self.cfg.controller.evals_per_block,
            gates_per_eval,
            blocks_touched: 0,
            rng: None,
        };
        let result = compensate(&mut self.sessions[i], &lattice, &mut probe, &controller, window, shape);
        let blocks = probe.blocks_touched;
        self.users[i].busy_until = start + blocks;
        match result {
            Ok(c) => {
                self.series.events.push(EventRecord::Compensation {
                    t: t_trigger,
                    user,
                    old_coarse: c.old_word.coarse,
                    old_fine: c.old_word.fine,
                    new_coarse: c.new_word.coarse,
                    new_fine: c.new_word.fine,
                    blocks: blocks as u32,
                    evaluations: c.evaluations,
                });
                if let Some(s) = self.sifter.as_deref_mut() {
                    match s.notify(user, c.new_word) {
                        Ok(()) | Err(LinkError::Closed | LinkError::Timeout) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            Err(crate::controller::ControllerError::NoSignal { evaluations, .. }) => {
                self.series.events.push(EventRecord::NoSignal {
                    t: t_trigger,
                    user,
                    evaluations,
                });
                self.leave(user, t_trigger, "no_signal")?;
            }
            Err(e) => return Err(ConfigError::invalid("controller", e).into()),
        }
        Ok(())
    }

    fn emit_metrics(&mut self, t_end: f64) {
        let block = self.block;
        for (u, s) in self.users.iter_mut().zip(&self.sessions) {
            if !(u.active || u.seen_in_interval) {
                continue;
            }
            let state = if u.busy_until > block {
                "compensating"
            } else if !u.active {
                "departed"
            } else {
                s.state.as_str()
            };
            self.series.metrics.push(MetricRecord {
                t: t_end,
                user: s.user_id,
                rate_bps: u.interval.rate(),
                qber: u.interval.qber(),
                word_coarse: s.word.coarse,
                word_fine: s.word.fine,
                state: state.into(),
                sifted: u.interval.sifted,
                sampled: u.interval.sampled,
                sample_errors: u.interval.sample_errors,
                key_time_s: u.interval.key_time_s,
            });
            u.interval = Tally::default();
            u.seen_in_interval = false;
        }
    }

    /// Runs to the configured duration and returns the collected series.
    pub fn run(mut self) -> Result<MetricsSeries, SimError> {
        while !self.is_done() {
            self.step_block()?;
        }
        if let Some(s) = self.sifter.as_deref_mut() {
            s.close()?;
        }
        if self.cfg.mode == Mode::PerPulse {
            for u in &self.users {
                self.series.keys.insert(u.cfg.id, u.keys.clone());
            }
        }
        Ok(self.series)
    }
}

/// Sifted rate of a perfectly aligned `user` sharing the clock with
/// `n_active` users in total.
pub fn nominal_rate_bps(cfg: &SimConfig, user: UserId, n_active: usize) -> Option<f64> {
    let u = cfg.user(user)?;
    let model = GateModel {
        signal_photons: cfg.mean_photons * transmittance(u.fiber.loss_db + cfg.server_loss_db),
        background_photons: 0.0,
        detector: cfg.detector,
    };
    Some(cfg.duty * cfg.f_max_hz / n_active.max(1) as f64 * 0.5 * model.sift_probability())
}

/// Simulates a whole scenario. Per-pulse configs sift in process.
pub fn run(cfg: &SimConfig) -> Result<MetricsSeries, SimError> {
    match cfg.mode {
        Mode::Block => Engine::new(cfg.clone())?.run(),
        Mode::PerPulse => {
            let mut sifter = InProcSifter::new(cfg.seed, cfg.qber_sample_fraction, None);
            Engine::with_sifter(cfg.clone(), &mut sifter)?.run()
        }
    }
}

/// Click counts for timing scans, drawn on the scanning user's own gates.
/// Each block is split into equal evaluation slots; drift advances at
/// block boundaries exactly as it would outside a scan.
struct SimProbe<'a> {
    lattice: DelayLattice,
    drift: &'a mut DriftState,
    base_ps: f64,
    model: GateModel,
    pulse_width_ps: f64,
    seed: u64,
    user: UserId,
    block: u64,
    block_s: f64,
    eval_in_block: u32,
    evals_per_block: u32,
    gates_per_eval: u64,
    blocks_touched: u64,
    rng: Option<rand_chacha::ChaCha8Rng>,
}

impl ClickProbe for SimProbe<'_> {
    fn probe(&mut self, word: TimingWord) -> u64 {
        if self.eval_in_block == 0 {
            if self.block > 0 {
                self.drift.advance(&mut stream(self.seed, Role::Drift, self.user, self.block));
            }
            self.rng = Some(stream(self.seed, Role::Probe, self.user, self.block));
            self.blocks_touched += 1;
        }
        let t = (self.block as f64 + f64::from(self.eval_in_block) / f64::from(self.evals_per_block)) * self.block_s;
        let dt = self.lattice.delay_unchecked(word) as f64 - (self.base_ps - self.drift.offset_at(t));
        let acceptance = misalignment_acceptance(dt, self.pulse_width_ps, self.model.detector.gate_width_ps);
        let model = GateModel {
            signal_photons: self.model.signal_photons * acceptance,
            ..self.model
        };
        let clicks = binomial(self.gates_per_eval, model.any_click(), self.rng.as_mut().expect("set above"));
        self.eval_in_block += 1;
        if self.eval_in_block == self.evals_per_block {
            self.eval_in_block = 0;
            self.block += 1;
        }
        clicks
    }

    fn slot_s(&self) -> f64 {
        self.block_s / f64::from(self.evals_per_block)
    }
}
