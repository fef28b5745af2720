//! Phase-encoded BB84 on the plug-and-play loop: state preparation, gate
//! sampling, raw-key demultiplexing, sifting and error estimation.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{gate_click_probabilities_with_background, DetectorParams};
use crate::rng::{stream, Role};
use crate::schedule::{FireSchedule, UserId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("gate {gate} is not owned by user {claimed} under the current schedule")]
    UnownedGate { gate: u64, claimed: UserId },
    #[error("server and user records are not index-aligned at position {position}")]
    IndexMismatch { position: usize },
    #[error("empty QBER sample")]
    EmptySample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Click {
    None,
    D0,
    D1,
    Both,
}

impl Click {
    pub fn clicked(self) -> bool {
        self != Click::None
    }
}

/// What the server knows about one gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub gate_index: u64,
    pub owner: UserId,
    pub server_basis: u8,
    pub click: Click,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intensity {
    Signal,
    Decoy,
    Vacuum,
}

/// What a user prepared for one pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub pulse_index: u64,
    pub basis: u8,
    pub bit: u8,
    pub intensity: Intensity,
}

pub fn encode_phase(bit: u8, basis: u8) -> f64 {
    f64::from(basis & 1) * FRAC_PI_2 + f64::from(bit & 1) * PI
}

pub fn server_phase(basis: u8) -> f64 {
    f64::from(basis & 1) * FRAC_PI_2
}

/// Samples the detectors for one gate. D0 and D1 are drawn independently.
pub fn sample_gate<R: Rng + ?Sized>(
    user: &UserRecord,
    server_basis: u8,
    mean_photons: f64,
    background_photons: f64,
    params: &DetectorParams,
    rng: &mut R,
) -> Click {
    let dphi = encode_phase(user.bit, user.basis) - server_phase(server_basis);
    let (p0, p1) = gate_click_probabilities_with_background(mean_photons, background_photons, dphi, params);
    let d0 = rng.random::<f64>() < p0;
    let d1 = rng.random::<f64>() < p1;
    match (d0, d1) {
        (false, false) => Click::None,
        (true, false) => Click::D0,
        (false, true) => Click::D1,
        (true, true) => Click::Both,
    }
}

/// The pulses a user prepares in one block, regenerated from the run seed.
pub fn user_records(seed: u64, user: UserId, block: u64, n: usize) -> Vec<UserRecord> {
    let mut bits = stream(seed, Role::UserBits, user, block);
    let mut bases = stream(seed, Role::UserBases, user, block);
    (0..n as u64)
        .map(|pulse_index| UserRecord {
            pulse_index,
            basis: bases.random::<bool>() as u8,
            bit: bits.random::<bool>() as u8,
            intensity: Intensity::Signal,
        })
        .collect()
}

/// Server measurement bases for a user's gates in one block.
pub fn server_bases(seed: u64, user: UserId, block: u64, n: usize) -> Vec<u8> {
    let mut rng = stream(seed, Role::ServerBasis, user, block);
    (0..n).map(|_| rng.random::<bool>() as u8).collect()
}

/// Routes each raw record to its gate owner, preserving order.
pub fn demux_raw(
    records: impl IntoIterator<Item = RawRecord>,
    schedule: &FireSchedule,
) -> Result<BTreeMap<UserId, Vec<RawRecord>>, ProtocolError> {
    let mut out: BTreeMap<UserId, Vec<RawRecord>> = schedule.slot_owner.iter().map(|&u| (u, Vec::new())).collect();
    for r in records {
        if schedule.n_users() == 0 || schedule.gate_owner(r.gate_index) != r.owner {
            return Err(ProtocolError::UnownedGate {
                gate: r.gate_index,
                claimed: r.owner,
            });
        }
        out.entry(r.owner).or_default().push(r);
    }
    Ok(out)
}

/// Matched-basis single clicks, by position in the block.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftedKey {
    pub kept: Vec<u32>,
    pub server_bits: Vec<u8>,
    pub user_bits: Vec<u8>,
}

/// Server bit for a click under matched bases: D0 means 0, D1 means 1.
pub fn click_bit(click: Click) -> Option<u8> {
    match click {
        Click::D0 => Some(0),
        Click::D1 => Some(1),
        _ => None,
    }
}

/// Positions whose bases match and where exactly one detector fired.
pub fn sift_positions(server_bases: &[u8], clicks: &[Click], user_bases: &[u8]) -> Vec<u32> {
    server_bases
        .iter()
        .zip(clicks)
        .zip(user_bases)
        .enumerate()
        .filter(|(_, ((sb, c), ub))| sb == ub && click_bit(**c).is_some())
        .map(|(i, _)| i as u32)
        .collect()
}

pub fn sift(server: &[RawRecord], user: &[UserRecord]) -> Result<SiftedKey, ProtocolError> {
    if server.len() != user.len() {
        return Err(ProtocolError::IndexMismatch {
            position: server.len().min(user.len()),
        });
    }
    let first = user.first().map(|u| u.pulse_index).unwrap_or(0);
    if let Some(position) = user.iter().enumerate().position(|(i, u)| u.pulse_index != first + i as u64) {
        return Err(ProtocolError::IndexMismatch { position });
    }
    let mut key = SiftedKey::default();
    for (i, (s, u)) in server.iter().zip(user).enumerate() {
        if s.server_basis != u.basis {
            continue;
        }
        if let Some(bit) = click_bit(s.click) {
            key.kept.push(i as u32);
            key.server_bits.push(bit);
            key.user_bits.push(u.bit);
        }
    }
    Ok(key)
}

/// Positions (into the sifted string) disclosed for error estimation.
pub fn choose_sample<R: Rng + ?Sized>(n_sifted: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    let k = ((n_sifted as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut picked = index::sample(rng, n_sifted, k.min(n_sifted)).into_vec();
    picked.sort_unstable();
    picked
}

/// Error fraction between our bits and the peer's disclosed bits.
pub fn estimate_qber(own: &[u8], disclosed: &[u8]) -> Result<f64, ProtocolError> {
    if own.is_empty() || own.len() != disclosed.len() {
        return Err(ProtocolError::EmptySample);
    }
    let errors = own.iter().zip(disclosed).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / own.len() as f64)
}

/// Bits left after removing the disclosed positions.
pub fn strip_sample(bits: &[u8], sample: &[usize]) -> Vec<u8> {
    let mut skip = sample.iter().peekable();
    bits.iter()
        .enumerate()
        .filter(|(i, _)| {
            if skip.peek() == Some(&i) {
                skip.next();
                false
            } else {
                true
            }
        })
        .map(|(_, b)| *b)
        .collect()
}

/// One user's sifting result for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiftedBlock {
    pub user_id: UserId,
    pub block_id: u64,
    /// Key bits after the disclosed sample is removed.
    pub bits: Vec<u8>,
    pub sifted_count: u64,
    pub sampled: u64,
    pub sample_errors: u64,
    pub qber_estimate: Option<f64>,
    pub duration_s: f64,
}

/// Expected sifted rate given per-gate click probabilities.
pub fn analytic_sifted_rate(f_user_hz: f64, duty: f64, p_click_signal: f64, p_dark_total: f64) -> f64 {
    duty * f_user_hz * 0.5 * (p_click_signal + p_dark_total - p_click_signal * p_dark_total)
}

/// Expected error rate from the optical floor and uncorrelated dark clicks.
pub fn analytic_qber(p_sig: f64, p_dark_total: f64, visibility: f64) -> f64 {
    let total = p_sig + p_dark_total;
    if total <= 0.0 {
        return 0.5;
    }
    let e_opt = (1.0 - visibility) / 2.0;
    (e_opt * p_sig + 0.5 * p_dark_total) / total
}
