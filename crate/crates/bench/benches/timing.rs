use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use qkdnet_core::lattice::{scan_search, DelayLattice, DelayWindow, TimingWord};
use qkdnet_core::sim::{field_metro, Engine};

fn quantize(c: &mut Criterion) {
    let lattice = DelayLattice::default();
    c.bench_function("quantize 10k targets", |b| {
        b.iter(|| {
            let mut acc = 0u64;
            for t in (0..10_000).map(|i| i as f64 * 97.3) {
                let w = lattice.quantize(black_box(t)).unwrap();
                acc += u64::from(w.coarse) + u64::from(w.fine);
            }
            acc
        })
    });
}

fn scan(c: &mut Criterion) {
    let lattice = DelayLattice::default();
    let peak = 523_350.0;
    let window = DelayWindow::around(520_000, 20_000);
    let objective = |w: TimingWord| (1.0 - (lattice.delay_unchecked(w) as f64 - peak).abs() / 2000.0).max(0.0);
    c.bench_function("scan_search 40 ns window", |b| {
        b.iter(|| scan_search(&lattice, objective, black_box(window), 1_000, 0.01).unwrap())
    });
}

fn step_block(c: &mut Criterion) {
    let mut cfg = field_metro();
    cfg.duration_s = 3600.0;
    c.bench_function("step_block field-metro", |b| {
        b.iter_batched_ref(
            || {
                let mut engine = Engine::new(cfg.clone()).unwrap();
                for _ in 0..20 {
                    engine.step_block().unwrap();
                }
                engine
            },
            |engine| {
                for _ in 0..100 {
                    black_box(engine.step_block().unwrap());
                }
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, quantize, scan, step_block);
criterion_main!(benches);
