//! Seeded random streams, one per (role, user, block).
//!
//! Every consumer of randomness draws from its own labeled stream so that
//! runs are reproducible regardless of evaluation order, and so that two
//! processes holding the same seed can regenerate each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    ServerBasis = 1,
    UserBits = 2,
    UserBases = 3,
    Optics = 4,
    Drift = 5,
    QberSample = 6,
    Probe = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `role` owned by `user` during `block`.
pub fn stream(seed: u64, role: Role, user: u32, block: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    h = splitmix(h ^ role as u64);
    h = splitmix(h ^ u64::from(user));
    h = splitmix(h ^ block);
    ChaCha8Rng::seed_from_u64(h)
}
