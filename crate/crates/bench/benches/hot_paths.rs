//! Inference hot paths: the fusion rule, one gate forward pass, and prior
//! table lookups.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use finch_core::features::build_gating_features;
use finch_core::gate::{gate_forward, GateMode, GateParameters};
use finch_core::{fuse, CategoricalDistribution, FusionInputs, LogScoreVector, PriorTable, SpatioTemporalContext};

const N_CLASSES: usize = 256;

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> CategoricalDistribution {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    CategoricalDistribution::new(raw.into_iter().map(|v| v / sum).collect()).unwrap()
}

fn bench_fuse(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let audio = random_dist(&mut rng, N_CLASSES);
    let prior = random_dist(&mut rng, N_CLASSES);
    let log_audio: Vec<f64> = audio.probs().iter().map(|p| p.ln()).collect();
    c.bench_function("fuse_256_classes", |b| {
        b.iter(|| {
            fuse(&FusionInputs {
                audio_log_probs: LogScoreVector::new(log_audio.clone()).unwrap(),
                prior: prior.clone(),
                omega: 0.7,
                temperature: 1.1,
                epsilon: 1e-6,
            })
            .unwrap()
        })
    });
}

fn bench_gate_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gate = GateParameters::seeded(64, 0.1, 7).unwrap();
    let audio = random_dist(&mut rng, N_CLASSES);
    let prior = random_dist(&mut rng, N_CLASSES);
    let ctx = SpatioTemporalContext::new(42.0, -71.0, 120.0, 9.5).unwrap();
    let u = build_gating_features(&audio, &prior, &ctx).unwrap();
    c.bench_function("gate_forward_hidden_64", |b| {
        b.iter(|| gate_forward(&gate, &u, GateMode::Eval, &mut rng).unwrap())
    });
}

fn bench_prior_lookup(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n_rows = 10_000usize;
    let ids: Vec<u64> = (0..n_rows as u64).collect();
    let rows: Vec<Vec<f32>> = (0..n_rows)
        .map(|_| {
            let raw: Vec<f32> = (0..N_CLASSES).map(|_| rng.gen_range(0.01f32..1.0)).collect();
            let sum: f32 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        })
        .collect();
    let table = PriorTable::new(ids, rows).unwrap();
    let mut i = 0u64;
    c.bench_function("prior_lookup_10k_rows", |b| {
        b.iter(|| {
            i = (i + 4099) % n_rows as u64;
            table.lookup(i).unwrap()
        })
    });
}

criterion_group!(benches, bench_fuse, bench_gate_forward, bench_prior_lookup);
criterion_main!(benches);
