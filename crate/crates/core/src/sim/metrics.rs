use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::link::Bitmap;
use crate::schedule::UserId;

/// One user over one metrics interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub t: f64,
    pub user: UserId,
    pub rate_bps: f64,
    pub qber: Option<f64>,
    pub word_coarse: u32,
    pub word_fine: u32,
    pub state: String,
    #[serde(skip)]
    pub sifted: u64,
    #[serde(skip)]
    pub sampled: u64,
    #[serde(skip)]
    pub sample_errors: u64,
    #[serde(skip)]
    pub key_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventRecord {
    Compensation {
        t: f64,
        user: UserId,
        old_coarse: u32,
        old_fine: u32,
        new_coarse: u32,
        new_fine: u32,
        blocks: u32,
        evaluations: usize,
    },
    NoSignal {
        t: f64,
        user: UserId,
        evaluations: usize,
    },
    Join {
        t: f64,
        user: UserId,
    },
    Leave {
        t: f64,
        user: UserId,
        reason: String,
    },
    StepDrift {
        t: f64,
        user: UserId,
        ps: f64,
    },
    FiberCut {
        t: f64,
        user: UserId,
    },
    SetThreshold {
        t: f64,
        min_rate_fraction: f64,
        max_qber: f64,
        consecutive_bad_blocks: u32,
    },
}

impl EventRecord {
    pub fn t(&self) -> f64 {
        match self {
            EventRecord::Compensation { t, .. }
            | EventRecord::NoSignal { t, .. }
            | EventRecord::Join { t, .. }
            | EventRecord::Leave { t, .. }
            | EventRecord::StepDrift { t, .. }
            | EventRecord::FiberCut { t, .. }
            | EventRecord::SetThreshold { t, .. } => *t,
        }
    }

    pub fn user(&self) -> Option<UserId> {
        match self {
            EventRecord::Compensation { user, .. }
            | EventRecord::NoSignal { user, .. }
            | EventRecord::Join { user, .. }
            | EventRecord::Leave { user, .. }
            | EventRecord::StepDrift { user, .. }
            | EventRecord::FiberCut { user, .. } => Some(*user),
            EventRecord::SetThreshold { .. } => None,
        }
    }
}

/// Both sides' final key bits for one user (per-pulse runs only).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyPair {
    pub server: Vec<u8>,
    pub user: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSeries {
    pub metrics: Vec<MetricRecord>,
    pub events: Vec<EventRecord>,
    pub keys: BTreeMap<UserId, KeyPair>,
}

impl MetricsSeries {
    pub fn is_empty(&self) -> bool {
        self.metrics.is_empty() && self.events.is_empty()
    }

    pub fn for_user(&self, user: UserId) -> impl Iterator<Item = &MetricRecord> {
        self.metrics.iter().filter(move |m| m.user == user)
    }

    pub fn compensations(&self, user: UserId) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, EventRecord::Compensation { user: u, .. } if *u == user))
            .count()
    }

    /// Metric and event lines merged in time order, metrics first on ties.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let (mut i, mut j) = (0, 0);
        while i < self.metrics.len() || j < self.events.len() {
            let take_metric = match (self.metrics.get(i), self.events.get(j)) {
                (Some(m), Some(e)) => m.t <= e.t(),
                (Some(_), None) => true,
                _ => false,
            };
            if take_metric {
                serde_json::to_writer(&mut w, &self.metrics[i])?;
                i += 1;
            } else {
                serde_json::to_writer(&mut w, &self.events[j])?;
                j += 1;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn summary(&self) -> Vec<UserSummary> {
        let mut by_user: BTreeMap<UserId, UserSummary> = BTreeMap::new();
        for m in &self.metrics {
            by_user.entry(m.user).or_insert_with(|| UserSummary::new(m.user)).add(m.rate_bps, m.qber);
        }
        for e in &self.events {
            if let (EventRecord::Compensation { user, .. }, Some(s)) = (e, e.user().and_then(|u| by_user.get_mut(&u))) {
                debug_assert_eq!(*user, s.user);
                s.compensations += 1;
            }
        }
        by_user.into_values().collect()
    }

    pub fn keys_json(&self) -> String {
        let users: Vec<KeyEntry> = self
            .keys
            .iter()
            .map(|(&user, k)| KeyEntry {
                user,
                server_key: Bitmap::from_u8s(&k.server),
                user_key: k.user.as_ref().map(|b| Bitmap::from_u8s(b)),
            })
            .collect();
        serde_json::to_string_pretty(&KeyFile { users }).expect("keys serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyEntry {
    pub user: UserId,
    pub server_key: Bitmap,
    pub user_key: Option<Bitmap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyFile {
    pub users: Vec<KeyEntry>,
}

/// Per-user aggregate over a series: plain means of the interval values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserSummary {
    pub user: UserId,
    pub intervals: u64,
    pub mean_rate_bps: f64,
    pub mean_qber: Option<f64>,
    pub compensations: u64,
    #[serde(skip)]
    rate_sum: f64,
    #[serde(skip)]
    qber_sum: f64,
    #[serde(skip)]
    qber_n: u64,
}

impl UserSummary {
    fn new(user: UserId) -> Self {
        Self {
            user,
            intervals: 0,
            mean_rate_bps: 0.0,
            mean_qber: None,
            compensations: 0,
            rate_sum: 0.0,
            qber_sum: 0.0,
            qber_n: 0,
        }
    }

    fn add(&mut self, rate: f64, qber: Option<f64>) {
        self.intervals += 1;
        self.rate_sum += rate;
        self.mean_rate_bps = self.rate_sum / self.intervals as f64;
        if let Some(q) = qber {
            self.qber_n += 1;
            self.qber_sum += q;
            self.mean_qber = Some(self.qber_sum / self.qber_n as f64);
        }
    }
}

pub fn summary_csv(summaries: &[UserSummary]) -> String {
    let mut out = String::from("user,intervals,mean_rate_bps,mean_qber,compensations\n");
    for s in summaries {
        let qber = s.mean_qber.map(|q| format!("{q:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.3},{},{}\n",
            s.user, s.intervals, s.mean_rate_bps, qber, s.compensations
        ));
    }
    out
}

/// Reads a metrics file back. Event lines count compensations; anything
/// else must be a metric line.
pub fn summarize_jsonl<R: BufRead>(reader: R) -> Result<Vec<UserSummary>, String> {
    let mut by_user: BTreeMap<UserId, UserSummary> = BTreeMap::new();
    let mut last_t = f64::NEG_INFINITY;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", n + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", n + 1))?;
        if value.get("event").is_some() {
            let event: EventRecord = serde_json::from_value(value).map_err(|e| format!("line {}: {e}", n + 1))?;
            if let EventRecord::Compensation { user, .. } = event {
                by_user.entry(user).or_insert_with(|| UserSummary::new(user)).compensations += 1;
            }
            continue;
        }
        let m: MetricRecord = serde_json::from_value(value).map_err(|e| format!("line {}: {e}", n + 1))?;
        if m.t < last_t {
            return Err(format!("line {}: timestamps go backwards", n + 1));
        }
        last_t = m.t;
        by_user.entry(m.user).or_insert_with(|| UserSummary::new(m.user)).add(m.rate_bps, m.qber);
    }
    Ok(by_user.into_values().collect())
}
