//! Simulation and control library for a 1xN plug-and-play QKD network
//! with per-user optical path length compensation.
//!
//! The server drives one laser per user through a serializer and a fine
//! delay chain ([`lattice`]), divides the 10 MHz gate clock among the
//! active users ([`schedule`]), detects the returning pulses ([`optics`]),
//! sifts the raw key with each user ([`protocol`], [`link`]) and keeps every
//! user's laser timing locked to its drifting optimum ([`controller`]).
//! [`sim`] ties these together on a simulated timeline.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod lattice;
pub mod link;
pub mod optics;
pub mod protocol;
pub mod rng;
pub mod schedule;
pub mod sim;

pub use controller::{ControllerConfig, Decision, SessionState, Thresholds, UserSession};
pub use lattice::{DelayLattice, DelayWindow, TimingWord};
pub use optics::{DetectorParams, DriftParams, DriftState, FiberChannel};
pub use protocol::{Click, RawRecord, SiftedBlock, UserRecord};
pub use schedule::{ChannelPlanEntry, FireSchedule, Polarization, UserId};
pub use sim::{MetricsSeries, SimConfig};
