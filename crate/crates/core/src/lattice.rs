//! Laser-fire delay lattice: coarse serializer steps plus a fine delay chain.
//!
//! A [`TimingWord`] selects one serializer position and one delay-chain
//! setting. The set of delays reachable this way is the lattice
//! `{coarse * coarse_step + fine * fine_step}`; as long as the delay chain
//! spans at least one serializer step the lattice has no holes coarser than
//! `fine_step`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("lattice steps must be strictly positive (coarse {coarse_step_ps} ps, fine {fine_step_ps} ps, {fine_steps_max} fine steps)")]
    NonPositive {
        coarse_step_ps: i64,
        fine_step_ps: i64,
        fine_steps_max: u32,
    },
    #[error("delay chain spans {span_ps} ps, less than one serializer step of {coarse_step_ps} ps")]
    Uncovered { span_ps: i64, coarse_step_ps: i64 },
    #[error("fine setting {fine} exceeds the delay-chain maximum {max}")]
    InvalidWord { fine: u32, max: u32 },
    #[error("target delay {0} ps is negative")]
    NegativeTarget(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScanError {
    #[error("no evaluated score rose above the noise floor {floor}")]
    NoSignal { floor: f64, evaluations: usize },
    #[error("window needs {needed} evaluations but the budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("empty or invalid scan window [{lo_ps}, {hi_ps}] ps")]
    EmptyWindow { lo_ps: i64, hi_ps: i64 },
}

/// Serializer step, delay-chain step and delay-chain length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayLattice {
    pub coarse_step_ps: i64,
    pub fine_step_ps: i64,
    pub fine_steps_max: u32,
}

impl Default for DelayLattice {
    fn default() -> Self {
        Self {
            coarse_step_ps: 1000,
            fine_step_ps: 50,
            fine_steps_max: 22,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct TimingWord {
    pub coarse: u32,
    pub fine: u32,
}

impl TimingWord {
    pub const fn new(coarse: u32, fine: u32) -> Self {
        Self { coarse, fine }
    }
}

impl std::fmt::Display for TimingWord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.coarse, self.fine)
    }
}

impl DelayLattice {
    pub fn new(coarse_step_ps: i64, fine_step_ps: i64, fine_steps_max: u32) -> Result<Self, LatticeError> {
        let lattice = Self {
            coarse_step_ps,
            fine_step_ps,
            fine_steps_max,
        };
        lattice.validate()?;
        Ok(lattice)
    }

    pub fn validate(&self) -> Result<(), LatticeError> {
        if self.coarse_step_ps <= 0 || self.fine_step_ps <= 0 || self.fine_steps_max == 0 {
            return Err(LatticeError::NonPositive {
                coarse_step_ps: self.coarse_step_ps,
                fine_step_ps: self.fine_step_ps,
                fine_steps_max: self.fine_steps_max,
            });
        }
        let span_ps = self.fine_span_ps();
        if span_ps < self.coarse_step_ps {
            return Err(LatticeError::Uncovered {
                span_ps,
                coarse_step_ps: self.coarse_step_ps,
            });
        }
        Ok(())
    }

    /// Total delay the fine chain can add on top of one serializer position.
    pub fn fine_span_ps(&self) -> i64 {
        self.fine_step_ps * i64::from(self.fine_steps_max)
    }

    pub fn check(&self, word: TimingWord) -> Result<(), LatticeError> {
        if word.fine > self.fine_steps_max {
            Err(LatticeError::InvalidWord {
                fine: word.fine,
                max: self.fine_steps_max,
            })
        } else {
            Ok(())
        }
    }

    pub fn representable_delay(&self, word: TimingWord) -> Result<i64, LatticeError> {
        self.check(word)?;
        Ok(self.delay_unchecked(word))
    }

    /// Delay of a word already known to be valid on this lattice.
    pub fn delay_unchecked(&self, word: TimingWord) -> i64 {
        i64::from(word.coarse) * self.coarse_step_ps + i64::from(word.fine) * self.fine_step_ps
    }

    /// Nearest representable word to `target_ps`.
    ///
    /// Ties between two delays resolve to the smaller delay. When several
    /// words produce the same delay the one with the fewest fine steps is
    /// returned, so every delay has a single canonical word.
    pub fn quantize(&self, target_ps: f64) -> Result<TimingWord, LatticeError> {
        if !(target_ps >= 0.0) {
            return Err(LatticeError::NegativeTarget(target_ps));
        }
        let coarse = self.coarse_step_ps as f64;
        let fine = self.fine_step_ps as f64;
        let span = self.fine_span_ps() as f64;

        let hi = (target_ps / coarse).floor() as i64 + 1;
        let lo = (((target_ps - span) / coarse).floor() as i64).max(0);

        let mut best: Option<(f64, i64, TimingWord)> = None;
        for c in lo..=hi {
            let base = c as f64 * coarse;
            // Two fine candidates bracket the target for this serializer position.
            let below = ((target_ps - base) / fine).floor();
            for f in [below, below + 1.0] {
                let f = f.clamp(0.0, f64::from(self.fine_steps_max)) as u32;
                let word = TimingWord::new(c as u32, f);
                let delay = self.delay_unchecked(word);
                let err = (delay as f64 - target_ps).abs();
                let better = match best {
                    None => true,
                    Some((best_err, best_delay, best_word)) => {
                        err < best_err
                            || (err == best_err && delay < best_delay)
                            || (err == best_err && delay == best_delay && word.fine < best_word.fine)
                    }
                };
                if better {
                    best = Some((err, delay, word));
                }
            }
        }
        // lo..=hi is never empty, so a candidate always exists.
        Ok(best.map(|(_, _, w)| w).unwrap_or_default())
    }

    /// Canonical word for a delay that lies exactly on the lattice.
    pub fn word_for(&self, delay_ps: i64) -> Option<TimingWord> {
        if delay_ps < 0 {
            return None;
        }
        let word = self.quantize(delay_ps as f64).ok()?;
        (self.delay_unchecked(word) == delay_ps).then_some(word)
    }
}

/// Closed interval of laser delays, in picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayWindow {
    pub lo_ps: i64,
    pub hi_ps: i64,
}

impl DelayWindow {
    pub fn new(lo_ps: i64, hi_ps: i64) -> Self {
        Self { lo_ps, hi_ps }
    }

    /// `center ± half_width`, clipped at zero delay.
    pub fn around(center_ps: i64, half_width_ps: i64) -> Self {
        Self {
            lo_ps: (center_ps - half_width_ps).max(0),
            hi_ps: (center_ps + half_width_ps).max(0),
        }
    }

    pub fn contains(&self, delay_ps: i64) -> bool {
        (self.lo_ps..=self.hi_ps).contains(&delay_ps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome {
    pub word: TimingWord,
    pub delay_ps: i64,
    pub score: f64,
    /// Every evaluated (delay, score) pair, keyed by delay.
    pub samples: BTreeMap<i64, f64>,
    pub evaluations: usize,
}

/// Number of evaluations a two-phase scan of `window` needs at most.
pub fn scan_cost(lattice: &DelayLattice, window: DelayWindow) -> usize {
    coarse_points(lattice, window).len() + 2 * fine_points_per_coarse(lattice)
}

fn fine_points_per_coarse(lattice: &DelayLattice) -> usize {
    (lattice.coarse_step_ps / lattice.fine_step_ps).max(1) as usize
}

fn coarse_points(lattice: &DelayLattice, window: DelayWindow) -> Vec<i64> {
    let fine = lattice.fine_step_ps;
    let first = (window.lo_ps + fine - 1).div_euclid(fine) * fine;
    let mut points = Vec::new();
    let mut d = first.max(0);
    while d <= window.hi_ps {
        points.push(d);
        d += lattice.coarse_step_ps;
    }
    points
}

/// Two-phase search for the best-scoring word inside `window`.
///
/// The coarse phase evaluates one point per serializer step across the
/// window. The fine phase then walks the delay chain over one serializer
/// step on either side of the coarse winner. The highest score wins; ties
/// go to the smaller delay. Scores at or below `noise_floor` count as no
/// signal.
pub fn scan_search<F>(
    lattice: &DelayLattice,
    mut objective: F,
    window: DelayWindow,
    budget: usize,
    noise_floor: f64,
) -> Result<ScanOutcome, ScanError>
where
    F: FnMut(TimingWord) -> f64,
{
    let coarse = coarse_points(lattice, window);
    if window.hi_ps < window.lo_ps || window.hi_ps < 0 || coarse.is_empty() {
        return Err(ScanError::EmptyWindow {
            lo_ps: window.lo_ps,
            hi_ps: window.hi_ps,
        });
    }
    let needed = coarse.len() + 2 * fine_points_per_coarse(lattice);
    if needed > budget {
        return Err(ScanError::BudgetExceeded { needed, budget });
    }

    let mut samples: BTreeMap<i64, f64> = BTreeMap::new();
    let mut evaluate = |delay: i64, samples: &mut BTreeMap<i64, f64>| -> Option<f64> {
        if let Some(score) = samples.get(&delay) {
            return Some(*score);
        }
        let word = lattice.quantize(delay as f64).ok()?;
        let actual = lattice.delay_unchecked(word);
        if !window.contains(actual) {
            return None;
        }
        if let Some(score) = samples.get(&actual) {
            return Some(*score);
        }
        let score = objective(word);
        samples.insert(actual, score);
        Some(score)
    };

    for &d in &coarse {
        evaluate(d, &mut samples);
    }
    let coarse_winner = best_of(&samples).map(|(d, _)| d).unwrap_or(coarse[0]);

    let span = lattice.coarse_step_ps;
    let mut d = coarse_winner - span;
    while d <= coarse_winner + span {
        if window.contains(d) {
            evaluate(d, &mut samples);
        }
        d += lattice.fine_step_ps;
    }

    let evaluations = samples.len();
    let (delay_ps, score) = best_of(&samples).expect("at least one coarse point was evaluated");
    if score <= noise_floor {
        return Err(ScanError::NoSignal {
            floor: noise_floor,
            evaluations,
        });
    }
    let word = lattice
        .quantize(delay_ps as f64)
        .expect("evaluated delays are non-negative");
    Ok(ScanOutcome {
        word,
        delay_ps,
        score,
        samples,
        evaluations,
    })
}

// BTreeMap iterates by ascending delay, so keeping the first maximum
// implements the smaller-delay tie rule.
fn best_of(samples: &BTreeMap<i64, f64>) -> Option<(i64, f64)> {
    let mut best: Option<(i64, f64)> = None;
    for (&d, &s) in samples {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((d, s));
        }
    }
    best
}
