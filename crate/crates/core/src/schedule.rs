//! Wavelength/polarization channel plan, TDM clock division and the
//! per-user laser fire schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest network the WDM/PDM plan supports.
pub const MAX_USERS: usize = 64;
/// Users per polarization group.
pub const GROUP_SIZE: u32 = 32;
pub const GRID_START_NM: f64 = 1532.0;
pub const GRID_END_NM: f64 = 1561.0;

pub type UserId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("{0} users requested, the channel plan holds at most 64")]
    TooManyUsers(usize),
    #[error("no active users")]
    NoUsers,
    #[error("users {a} and {b} would fire at the same offset {offset_ps} ps")]
    SlotCollision { a: UserId, b: UserId, offset_ps: f64 },
    #[error("gate period must be positive, got {0} ps")]
    BadGatePeriod(f64),
    #[error("negative round-trip delay {delay_ps} ps for user {user}")]
    NegativeDelay { user: UserId, delay_ps: f64 },
    #[error("slot map does not list each user exactly once")]
    BadSlotMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    Vertical,
    Horizontal,
}

/// Server phase modulator serving a polarization group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PmGroup {
    #[serde(rename = "PM_B1")]
    PmB1,
    #[serde(rename = "PM_B2")]
    PmB2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlanEntry {
    pub user_id: UserId,
    pub wavelength_nm: f64,
    pub polarization: Polarization,
    pub pm_group: PmGroup,
}

/// Wavelength grid: 32 evenly spaced lines from 1532 nm to 1561 nm.
pub fn grid_spacing_nm() -> f64 {
    (GRID_END_NM - GRID_START_NM) / f64::from(GROUP_SIZE - 1)
}

/// Plan entry for a single channel id in `1..=64`.
pub fn channel_entry(channel: UserId) -> Result<ChannelPlanEntry, ScheduleError> {
    if channel == 0 || channel as usize > MAX_USERS {
        return Err(ScheduleError::TooManyUsers(channel as usize));
    }
    let (index, polarization, pm_group) = if channel <= GROUP_SIZE {
        (channel - 1, Polarization::Vertical, PmGroup::PmB1)
    } else {
        (channel - GROUP_SIZE - 1, Polarization::Horizontal, PmGroup::PmB2)
    };
    Ok(ChannelPlanEntry {
        user_id: channel,
        wavelength_nm: GRID_START_NM + f64::from(index) * grid_spacing_nm(),
        polarization,
        pm_group,
    })
}

pub fn channel_plan(n_users: usize) -> Result<Vec<ChannelPlanEntry>, ScheduleError> {
    if n_users > MAX_USERS {
        return Err(ScheduleError::TooManyUsers(n_users));
    }
    (1..=n_users as UserId).map(channel_entry).collect()
}

/// Laser frequency each user gets when `n_active` users share the clock.
pub fn per_user_frequency(n_active: usize, f_max_hz: f64) -> Result<f64, ScheduleError> {
    if n_active == 0 {
        return Err(ScheduleError::NoUsers);
    }
    Ok(f_max_hz / n_active as f64)
}

/// Users ordered for firing: longest round trip first, ties by id.
pub fn fire_order(users: &[(UserId, f64)]) -> Vec<UserId> {
    let mut sorted = users.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().map(|(id, _)| id).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotAssignment {
    pub user: UserId,
    pub slot: usize,
    /// Fire time relative to the superframe start, in `[0, frame)`.
    pub fire_offset_ps: f64,
    /// `slot * gate_period - round_trip`: how far ahead of its gate the laser fires.
    pub lead_ps: f64,
}

/// Laser fire offsets and gate-slot ownership for one superframe of
/// `N * gate_period`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireSchedule {
    pub gate_period_ps: f64,
    /// Index = slot, value = owning user.
    pub slot_owner: Vec<UserId>,
    /// In slot order.
    pub assignments: Vec<SlotAssignment>,
}

impl FireSchedule {
    pub fn n_users(&self) -> usize {
        self.slot_owner.len()
    }

    pub fn frame_ps(&self) -> f64 {
        self.gate_period_ps * self.n_users() as f64
    }

    pub fn gate_owner(&self, gate_index: u64) -> UserId {
        self.slot_owner[(gate_index % self.slot_owner.len() as u64) as usize]
    }

    pub fn slot_of(&self, user: UserId) -> Option<usize> {
        self.slot_owner.iter().position(|&u| u == user)
    }

    pub fn assignment(&self, user: UserId) -> Option<&SlotAssignment> {
        self.slot_of(user).map(|s| &self.assignments[s])
    }

    /// Gates owned by `user` in `[start, start + len)`.
    pub fn owned_gates_in(&self, user: UserId, start: u64, len: u64) -> u64 {
        let Some(slot) = self.slot_of(user) else {
            return 0;
        };
        count_residue(start, len, self.n_users() as u64, slot as u64)
    }
}

/// Count of `g` in `[start, start+len)` with `g % n == r`.
pub fn count_residue(start: u64, len: u64, n: u64, r: u64) -> u64 {
    let below = |x: u64| if x > r { (x - r - 1) / n + 1 } else { 0 };
    below(start + len) - below(start)
}

/// Builds the fire schedule.
///
/// Slots follow `slot_map` when given (index = slot), otherwise fire order
/// rank. A user in slot `s` fires at `s * gate_period - round_trip` modulo
/// the superframe so its return pulse lands in gate `s`.
pub fn fire_schedule(
    users: &[(UserId, f64)],
    gate_period_ps: f64,
    slot_map: Option<&[UserId]>,
) -> Result<FireSchedule, ScheduleError> {
    if users.is_empty() {
        return Err(ScheduleError::NoUsers);
    }
    if users.len() > MAX_USERS {
        return Err(ScheduleError::TooManyUsers(users.len()));
    }
    if !(gate_period_ps > 0.0) {
        return Err(ScheduleError::BadGatePeriod(gate_period_ps));
    }
    if let Some(&(user, delay_ps)) = users.iter().find(|(_, d)| !(*d >= 0.0)) {
        return Err(ScheduleError::NegativeDelay { user, delay_ps });
    }

    let slot_owner: Vec<UserId> = match slot_map {
        Some(map) => {
            let mut a: Vec<UserId> = map.to_vec();
            let mut b: Vec<UserId> = users.iter().map(|u| u.0).collect();
            a.sort_unstable();
            b.sort_unstable();
            if a != b {
                return Err(ScheduleError::BadSlotMap);
            }
            map.to_vec()
        }
        None => fire_order(users),
    };

    let frame = gate_period_ps * users.len() as f64;
    let assignments: Vec<SlotAssignment> = slot_owner
        .iter()
        .enumerate()
        .map(|(slot, &user)| {
            let rtt = users.iter().find(|u| u.0 == user).map(|u| u.1).unwrap_or(0.0);
            let lead_ps = slot as f64 * gate_period_ps - rtt;
            SlotAssignment {
                user,
                slot,
                fire_offset_ps: lead_ps.rem_euclid(frame),
                lead_ps,
            }
        })
        .collect();

    for (i, a) in assignments.iter().enumerate() {
        if let Some(b) = assignments[i + 1..].iter().find(|b| b.fire_offset_ps == a.fire_offset_ps) {
            return Err(ScheduleError::SlotCollision {
                a: a.user,
                b: b.user,
                offset_ps: a.fire_offset_ps,
            });
        }
    }

    Ok(FireSchedule {
        gate_period_ps,
        slot_owner,
        assignments,
    })
}

/// Owner of a gate under the identity slot map (slot `s` belongs to user `s + 1`).
pub fn gate_owner(gate_index: u64, n_users: usize) -> UserId {
    (gate_index % n_users.max(1) as u64) as UserId + 1
}
