//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

use qkdnet_core::lattice::{DelayLattice, TimingWord};
use qkdnet_core::link::{pump, BasisReveal, Bitmap, Body, LinkError, Message, ServerSession, UserEndpoint};
use qkdnet_core::optics::{DriftParams, FiberChannel};
use qkdnet_core::protocol::{analytic_qber, analytic_sifted_rate, Click};
use qkdnet_core::schedule::{fire_order, fire_schedule};
use qkdnet_core::sim::{self, field_metro, nominal_rate_bps, Engine, EventRecord, MetricsSeries, Mode, ScenarioEvent};
use qkdnet_core::SimConfig;

const BIN: &str = env!("CARGO_BIN_EXE_qkdnet");
const HOUR: f64 = 3600.0;
const C_KM_PER_PS: f64 = 2.997_924_58e-7;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn round_trip_ps(length_km: f64) -> f64 {
    2.0 * length_km * 1.468 / C_KM_PER_PS
}

fn transmittance(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

fn triangle(dt_ps: f64, half_support_ps: f64) -> f64 {
    (1.0 - dt_ps.abs() / half_support_ps).max(0.0)
}

fn day_of(t: f64) -> usize {
    ((t - 1e-9) / (24.0 * HOUR)).floor() as usize
}

fn daily_qber(series: &MetricsSeries, user: u32) -> Vec<f64> {
    let mut days: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for m in series.for_user(user) {
        let d = days.entry(day_of(m.t)).or_default();
        d.0 += m.sample_errors;
        d.1 += m.sampled;
    }
    days.values().map(|&(e, n)| e as f64 / n.max(1) as f64).collect()
}

fn c1_c2() -> (Outcome, Outcome) {
    let cfg = field_metro();
    let (series, elapsed) = timed(|| sim::run(&cfg).unwrap());
    let summary = series.summary();
    let qbers: Vec<f64> = summary.iter().map(|s| s.mean_qber.unwrap_or(f64::NAN)).collect();
    let in_band = qbers.iter().all(|q| (0.005..=0.025).contains(q));
    let c1 = Outcome::new(
        in_band && elapsed <= Duration::from_secs(30),
        format!(
            "mean QBER per user {:?} in [0.5%, 2.5%], 24 h in {:.1} s (limit 30 s)",
            qbers.iter().map(|q| format!("{:.2}%", 100.0 * q)).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    );

    let rate: BTreeMap<u32, f64> = summary.iter().map(|s| (s.user, s.mean_rate_bps)).collect();
    let calibrated = nominal_rate_bps(&cfg, 1, 4).unwrap();
    let targets = [(2, 1800.0), (3, 2300.0), (4, 2100.0)];
    let within = targets.iter().all(|&(u, t)| (rate[&u] - t).abs() <= 0.3 * t);
    let mut by_loss: Vec<(f64, u32)> = cfg.users.iter().map(|u| (u.fiber.loss_db, u.id)).collect();
    by_loss.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ordered = by_loss.windows(2).all(|w| rate[&w[0].1] > rate[&w[1].1]);
    let c2 = Outcome::new(
        within && ordered && (calibrated - 2300.0).abs() < 1e-6,
        format!(
            "user 1 fitted to {calibrated:.0} bps; rates u1..u4 = {:.0}/{:.0}/{:.0}/{:.0} bps; within 30% of 1.8/2.3/2.1k: {within}; decreasing with loss: {ordered}",
            rate[&1], rate[&2], rate[&3], rate[&4]
        ),
    );
    (c1, c2)
}

fn c3() -> Outcome {
    let mut on = field_metro();
    on.duration_s = 100.0 * HOUR;
    let mut off = on.clone();
    off.controller.enabled = false;

    let (series_on, t_on) = timed(|| sim::run(&on).unwrap());
    let (series_off, t_off) = timed(|| sim::run(&off).unwrap());

    let farthest = on
        .users
        .iter()
        .max_by(|a, b| a.fiber.length_km.total_cmp(&b.fiber.length_km))
        .unwrap()
        .id;
    let lattice = on.lattice;
    let delays: Vec<i64> = series_on
        .for_user(farthest)
        .map(|m| lattice.delay_unchecked(TimingWord::new(m.word_coarse, m.word_fine)))
        .collect();
    let excursion = delays.iter().map(|d| (d - delays[0]).abs()).max().unwrap_or(0) as f64;

    let mut worst_qber: f64 = 0.0;
    let mut comps = Vec::new();
    for u in &on.users {
        worst_qber = daily_qber(&series_on, u.id).into_iter().fold(worst_qber, f64::max);
        comps.push(series_on.compensations(u.id));
    }

    let final_day_start = on.duration_s - 24.0 * HOUR;
    let sifted: u64 = series_off
        .for_user(farthest)
        .filter(|m| m.t > final_day_start + 1e-9)
        .map(|m| m.sifted)
        .sum();
    let final_rate = sifted as f64 / (24.0 * HOUR);
    let nominal = nominal_rate_bps(&on, farthest, on.users.len()).unwrap();
    let ablation = final_rate / nominal;

    let limit = Duration::from_secs(60);
    let pass = excursion >= 28_000.0
        && worst_qber <= 0.04
        && comps.iter().all(|&c| c > 0)
        && ablation < 0.1
        && t_on <= limit
        && t_off <= limit;
    Outcome::new(
        pass,
        format!(
            "user {farthest} tracked {:.1} ns; worst daily QBER {:.2}%; compensations {comps:?}; ablation final-day rate {:.1}% of nominal; 100 h in {:.1} s / {:.1} s (limit 60 s each)",
            excursion / 1000.0,
            100.0 * worst_qber,
            100.0 * ablation,
            t_on.as_secs_f64(),
            t_off.as_secs_f64()
        ),
    )
}

/// Closest representable delay to `target`, by enumerating every word of
/// the lattice within `window` of it.
fn exhaustive_optimum(lattice: &DelayLattice, target: f64, window: f64, half_support: f64) -> i64 {
    let lo = ((target - window) / lattice.coarse_step_ps as f64).floor().max(0.0) as u32;
    let hi = ((target + window) / lattice.coarse_step_ps as f64).ceil() as u32;
    let mut best = (f64::NEG_INFINITY, 0i64);
    for c in lo..=hi {
        for f in 0..=lattice.fine_steps_max {
            let d = lattice.delay_unchecked(TimingWord::new(c, f));
            let score = triangle(d as f64 - target, half_support);
            if score > best.0 || (score == best.0 && d < best.1) {
                best = (score, d);
            }
        }
    }
    best.1
}

fn c4() -> Outcome {
    let mut cfg = field_metro();
    let step_at = 60.0;
    cfg.duration_s = 180.0;
    cfg.events.push(ScenarioEvent::StepDrift {
        time_s: step_at,
        user: 2,
        ps: 10_000.0,
    });
    let lattice = cfg.lattice;
    let half_support = (cfg.pulse_width_ps + cfg.detector.gate_width_ps) / 2.0;
    let mut engine = Engine::new(cfg.clone()).unwrap();
    let mut seen = 0;
    while engine.block_index() < cfg.n_blocks() {
        let t_next = (engine.block_index() + 1) as f64 * cfg.block_s;
        engine.step_block().unwrap();
        let events = &engine.series().events;
        let found = events[seen..].iter().find_map(|e| match e {
            EventRecord::Compensation {
                t,
                user: 2,
                new_coarse,
                new_fine,
                blocks,
                ..
            } if *t >= step_at => Some((TimingWord::new(*new_coarse, *new_fine), *blocks)),
            _ => None,
        });
        seen = events.len();
        if let Some((word, blocks)) = found {
            let t_done = t_next + f64::from(blocks) * cfg.block_s;
            let target = engine.required_delay_ps(2, t_done).unwrap();
            let optimum = exhaustive_optimum(&lattice, target, 20_000.0, half_support);
            let got = lattice.delay_unchecked(word);
            let err = (got as f64 - target).abs();
            return Outcome::new(
                err <= 25.0 && blocks <= 30,
                format!(
                    "recovered in {blocks} blocks; word {} ps vs exhaustive optimum {optimum} ps; residual {err:.1} ps (limit 25 ps, 30 blocks)",
                    got
                ),
            );
        }
    }
    Outcome::new(false, "no compensation followed the step")
}

fn c5() -> Outcome {
    let lattice = DelayLattice::default();
    let ((max_err, mismatches, ties_ok), elapsed) = timed(|| {
        let max_coarse = (1_000_000 / lattice.coarse_step_ps + 2) as u32;
        let mut points: Vec<i64> = (0..=max_coarse)
            .flat_map(|c| (0..=lattice.fine_steps_max).map(move |f| (c, f)))
            .map(|(c, f)| c as i64 * lattice.coarse_step_ps + f as i64 * lattice.fine_step_ps)
            .collect();
        points.sort_unstable();
        points.dedup();
        let nearest = |t: i64| {
            let i = points.partition_point(|&p| p < t);
            let above = points[i];
            match i.checked_sub(1).map(|j| points[j]) {
                Some(below) if t - below <= above - t => below,
                _ => above,
            }
        };
        let (mut max_err, mut mismatches, mut ties_ok) = (0i64, 0u64, true);
        for t in 0..=1_000_000i64 {
            let d = lattice.delay_unchecked(lattice.quantize(t as f64).unwrap());
            max_err = max_err.max((d - t).abs());
            if d != nearest(t) {
                mismatches += 1;
            }
            if t % lattice.fine_step_ps == lattice.fine_step_ps / 2 && d != t - lattice.fine_step_ps / 2 {
                ties_ok = false;
            }
        }
        (max_err, mismatches, ties_ok)
    });
    Outcome::new(
        mismatches == 0 && max_err <= 25 && ties_ok && elapsed <= Duration::from_secs(5),
        format!(
            "{mismatches} mismatches against the nearest-point oracle; max error {max_err} ps; ties downward: {ties_ok}; {:.2} s (limit 5 s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn c6() -> Outcome {
    let mut four = field_metro();
    four.duration_s = 600.0;
    let mut one = four.clone();
    one.users.retain(|u| u.id == 1);
    let rate = |cfg: &SimConfig| {
        let s = sim::run(cfg).unwrap();
        let sifted: u64 = s.for_user(1).map(|m| m.sifted).sum();
        sifted as f64 / cfg.duration_s
    };
    let (r1, r4) = (rate(&one), rate(&four));
    let ratio = r1 / r4;
    Outcome::new(
        (ratio - 4.0).abs() <= 0.05 * 4.0,
        format!("N=1 rate {r1:.0} bps vs N=4 rate {r4:.0} bps: ratio {ratio:.3} (4 within 5%)"),
    )
}

fn quiet(mut cfg: SimConfig) -> SimConfig {
    cfg.controller.enabled = false;
    cfg.crosstalk_suppression_db = f64::INFINITY;
    for u in &mut cfg.users {
        u.drift = DriftParams::default();
    }
    cfg
}

fn c7() -> Outcome {
    // Block mode against the closed forms.
    let mut cfg = quiet(field_metro());
    cfg.duration_s = 4.0;
    let engine = Engine::new(cfg.clone()).unwrap();
    let dt: BTreeMap<u32, f64> = cfg.users.iter().map(|u| (u.id, engine.timing_error_ps(u.id, 0.0).unwrap())).collect();
    let mut blocks = Vec::new();
    let mut engine = engine;
    for _ in 0..cfg.n_blocks() {
        blocks.extend(engine.step_block().unwrap());
    }
    let n = cfg.users.len() as f64;
    let half_support = (cfg.pulse_width_ps + cfg.detector.gate_width_ps) / 2.0;
    let d = cfg.detector.dark_cps_total / 2.0 / cfg.detector.gate_freq_hz;
    let p_dark = 1.0 - (1.0 - d) * (1.0 - d);
    let mut worst_z: f64 = 0.0;
    let mut min_owned = u64::MAX;
    for u in &cfg.users {
        let mine: Vec<_> = blocks.iter().filter(|b| b.user == u.id).collect();
        let owned: u64 = mine.iter().map(|b| b.owned_gates).sum();
        min_owned = min_owned.min(owned);
        let sifted: u64 = mine.iter().map(|b| b.sifted).sum();
        let sampled: u64 = mine.iter().map(|b| b.sampled).sum();
        let sample_errors: u64 = mine.iter().map(|b| b.sample_errors).sum();
        let mu = cfg.mean_photons
            * transmittance(u.fiber.loss_db + cfg.server_loss_db)
            * cfg.detector.efficiency
            * triangle(dt[&u.id], half_support);
        let p_sig = 1.0 - (-mu).exp();
        let expected = analytic_sifted_rate(cfg.f_max_hz / n, cfg.duty, p_sig, p_dark) * cfg.duration_s;
        let z_rate = (sifted as f64 - expected) / expected.sqrt();
        let q = analytic_qber(p_sig, p_dark, cfg.detector.visibility);
        let got_q = sample_errors as f64 / sampled as f64;
        let z_q = (got_q - q) / (q * (1.0 - q) / sampled as f64).sqrt();
        worst_z = worst_z.max(z_rate.abs()).max(z_q.abs());
    }

    // Block mode against per-pulse on small instances.
    let mut small = quiet(field_metro());
    small.users.truncate(1);
    small.users[0].fiber = FiberChannel::new(10.0, 0.0);
    small.server_loss_db = 0.0;
    small.duty = 1.0;
    small.f_max_hz = 1e5;
    small.duration_s = small.block_s;
    small.detector.dark_cps_total = 2e4;
    let runs = 200;
    let mut samples = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    for seed in 0..runs {
        small.seed = seed;
        for (k, mode) in [Mode::PerPulse, Mode::Block].into_iter().enumerate() {
            small.mode = mode;
            let s = sim::run(&small).unwrap();
            let m = s.for_user(1).next().unwrap();
            samples[0][k].push(m.sifted as f64);
            samples[1][k].push(m.sample_errors as f64);
        }
    }
    let mut worst_two: f64 = 0.0;
    for [a, b] in &samples {
        let stats = |x: &Vec<f64>| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64)
        };
        let ((ma, va), (mb, vb)) = (stats(a), stats(b));
        let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
        worst_two = worst_two.max((ma - mb).abs() / se);
    }

    Outcome::new(
        worst_z <= 3.0 && min_owned >= 100_000 && worst_two <= 4.0,
        format!(
            "worst block-vs-analytic deviation {worst_z:.2} sigma over {min_owned}+ owned gates (limit 3); per-pulse vs block on 10^4 gates {worst_two:.2} sigma (limit 4)"
        ),
    )
}

fn c8() -> Outcome {
    let mut cfg = quiet(field_metro());
    cfg.users.truncate(1);
    // A round trip on the lattice so the programmed delay hits the gate centre exactly.
    let length_km = 100_000_000.0 * C_KM_PER_PS / (2.0 * 1.468);
    cfg.users[0].fiber = FiberChannel::new(length_km, 1.0);
    cfg.detector.dark_cps_total = 0.0;
    cfg.detector.visibility = 1.0;
    cfg.mode = Mode::PerPulse;
    cfg.f_max_hz = 1e6;
    cfg.duty = 1.0;
    cfg.duration_s = 2.0;
    let dt = Engine::new(cfg.clone()).unwrap().timing_error_ps(1, 0.0).unwrap();
    let series = sim::run(&cfg).unwrap();
    let zero_qber = series.for_user(1).all(|m| m.qber == Some(0.0));
    let keys = &series.keys[&1];
    let identical = keys.user.as_ref() == Some(&keys.server) && !keys.server.is_empty();
    Outcome::new(
        dt.abs() < 1e-6 && zero_qber && identical,
        format!(
            "timing error {dt:.1e} ps; QBER exactly 0 in every interval: {zero_qber}; {} key bits identical on both sides: {identical}",
            keys.server.len()
        ),
    )
}

fn qkdnet(dir: &Path, args: &[&str]) -> bool {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn c9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = field_metro();
    cfg.mode = Mode::PerPulse;
    cfg.f_max_hz = 1e6;
    cfg.duty = 1.0;
    cfg.duration_s = 3.0;
    cfg.metrics_interval_s = 0.5;
    cfg.events.push(ScenarioEvent::StepDrift {
        time_s: 0.5,
        user: 2,
        ps: 8_000.0,
    });
    std::fs::write(dir.path().join("c.json"), cfg.to_json()).unwrap();
    let local = qkdnet(dir.path(), &["run", "--config", "c.json", "--out", "a.jsonl", "--keys", "a.keys"]);
    let net = qkdnet(
        dir.path(),
        &["run", "--config", "c.json", "--mode", "net", "--out", "b.jsonl", "--keys", "b.keys"],
    );
    let same = |a: &str, b: &str| {
        let x = std::fs::read(dir.path().join(a)).unwrap_or_default();
        !x.is_empty() && x == std::fs::read(dir.path().join(b)).unwrap_or_default()
    };
    let equivalent = local && net && same("a.jsonl", "b.jsonl") && same("a.keys", "b.keys");

    // Violations.
    let mut server = ServerSession::new(1, 5, 0.5);
    let mut user = UserEndpoint::new(1, 5);
    let hello = user.hello().unwrap();
    pump(&mut server, &mut user, hello, false, None).unwrap();
    let early = server.handle(&Message::new(
        server.session_id(),
        0,
        Body::BasisReveal(BasisReveal { bases: Bitmap::default() }),
    ));
    let reveal_first = matches!(early.error, Some(LinkError::ProtocolViolation(_)))
        && matches!(&early.outbound[..], [Message { body: Body::Error(e), .. }] if e.code == "protocol_violation");

    let mut server = ServerSession::new(1, 5, 0.5);
    let mut user = UserEndpoint::new(1, 5);
    let hello = user.hello().unwrap();
    pump(&mut server, &mut user, hello, false, None).unwrap();
    let clicks: Vec<Click> = (0..40).map(|i| if i % 4 == 0 { Click::D0 } else { Click::None }).collect();
    let bases: Vec<u8> = (0..40).map(|i| (i / 3 % 2) as u8).collect();
    let announce = server.announce(3, &clicks, &bases).unwrap();
    pump(&mut server, &mut user, announce.clone(), true, None).unwrap();
    let replay = user.handle(&announce);
    let user_side = replay.error == Some(LinkError::OutOfOrder { got: 3, last: Some(3) })
        && matches!(&replay.outbound[..], [Message { body: Body::Error(e), .. }] if e.code == "out_of_order")
        && !user.is_ready();
    let server_side = matches!(server.announce(2, &clicks, &bases), Err(LinkError::OutOfOrder { got: 2, .. }));

    Outcome::new(
        equivalent && reveal_first && user_side && server_side,
        format!(
            "5-process loopback run identical to in-process (metrics and keys): {equivalent}; early BASIS_REVEAL rejected: {reveal_first}; replayed block rejected by user: {user_side}, by server: {server_side}"
        ),
    )
}

fn c10() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let partition = runner.run(
        &(1usize..=64, 0u64..1_000_000_000, 0u64..3_000, any::<u64>()),
        |(n, start, len, salt)| {
            let users: Vec<(u32, f64)> = (1..=n as u32)
                .map(|id| (id, ((salt.wrapping_mul(u64::from(id) * 2_654_435_761) % 90_000_000) as f64)))
                .collect();
            let s = fire_schedule(&users, 100_000.0, None).unwrap();
            let mut counts = BTreeMap::new();
            for g in start..start + len {
                *counts.entry(s.gate_owner(g)).or_insert(0u64) += 1;
            }
            let mut total = 0;
            for &(id, _) in &users {
                let owned = s.owned_gates_in(id, start, len);
                prop_assert_eq!(owned, counts.get(&id).copied().unwrap_or(0));
                total += owned;
            }
            prop_assert_eq!(total, len);
            Ok(())
        },
    );

    let field: Vec<(u32, f64)> = [(1, 5.8), (2, 9.9), (3, 2.9), (4, 7.7)]
        .into_iter()
        .map(|(id, km)| (id, round_trip_ps(km)))
        .collect();
    let example = fire_order(&field) == vec![2, 4, 1, 3];
    let order = runner.run(&prop::collection::vec(0.0f64..100.0, 1..=64), |lengths| {
        let users: Vec<(u32, f64)> = lengths.iter().enumerate().map(|(i, &km)| (i as u32 + 1, round_trip_ps(km))).collect();
        let order = fire_order(&users);
        let rtt: BTreeMap<u32, f64> = users.iter().copied().collect();
        prop_assert!(order.windows(2).all(|w| rtt[&w[0]] >= rtt[&w[1]]));
        Ok(())
    });

    let departure = runner.run(&(2usize..=64, 1_000u64..10_000_000, any::<u64>()), |(n, gpb, pick)| {
        let users: Vec<(u32, f64)> = (1..=n as u32).map(|id| (id, f64::from(id) * 1_000_000.0)).collect();
        let leaving = (pick % n as u64) as u32 + 1;
        let rest: Vec<(u32, f64)> = users.iter().copied().filter(|u| u.0 != leaving).collect();
        let before = fire_schedule(&users, 100_000.0, None).unwrap();
        let after = fire_schedule(&rest, 100_000.0, None).unwrap();
        let scale = n as f64 / (n - 1) as f64;
        for &(id, _) in &rest {
            let b = before.owned_gates_in(id, 0, gpb) as f64;
            let a = after.owned_gates_in(id, 0, gpb) as f64;
            prop_assert!((a - b * scale).abs() <= 1.0 + scale, "n {} gpb {}: {} -> {}", n, gpb, b, a);
        }
        Ok(())
    });

    let (partition, order, departure) = (
        partition.map_err(|e| e.to_string()),
        order.map_err(|e| e.to_string()),
        departure.map_err(|e| e.to_string()),
    );
    let describe = |r: &Result<(), String>| r.clone().err().unwrap_or_else(|| "ok".into());
    Outcome::new(
        partition.is_ok() && example && order.is_ok() && departure.is_ok(),
        format!(
            "ownership partition: {}; fire order of the field links {:?}; descending round trip: {}; N/(N-1) on departure: {}",
            describe(&partition),
            fire_order(&field),
            describe(&order),
            describe(&departure)
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes us skips the run.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let mut results = Vec::new();
    let (c1, c2) = c1_c2();
    results.push((1, "QBER band", c1));
    results.push((2, "rate ordering and calibration", c2));
    results.push((3, "drift tracking", c3()));
    results.push((4, "compensation latency", c4()));
    results.push((5, "quantization", c5()));
    results.push((6, "TDM scaling", c6()));
    results.push((7, "oracle equivalence", c7()));
    results.push((8, "noiseless exactness", c8()));
    results.push((9, "mode equivalence", c9()));
    results.push((10, "schedule properties", c10()));

    let mut failed = 0;
    for (n, name, o) in &results {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("criterion {n:>2} [{verdict}] {name}: {}", o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
