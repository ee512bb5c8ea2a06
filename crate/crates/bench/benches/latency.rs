use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use sidebranch_core::latency::{parallel_latency, simulate_schedule, TeeCostCoeffs};
use sidebranch_core::moo::hypervolume;
use sidebranch_core::search_space::{estimate_memory, sample_random};
use sidebranch_core::{BackboneDims, CostProfile, FeatureDims, ObjectivePoint, ReferencePoint, SearchFactorRanges};

fn fixture() -> (SearchFactorRanges, CostProfile, BackboneDims) {
    let profile = CostProfile {
        gpu_block_ms: vec![0.9, 0.7, 0.55, 0.45],
        adapter_ms: vec![0.04, 0.03, 0.03, 0.02],
        transfer_base_ms: 0.02,
        transfer_bandwidth_bytes_per_ms: 4e5,
        tee_cost_coeffs: TeeCostCoeffs { ms_per_mac: 2e-5, overhead_ms: 0.05 },
        classifier_ms: 0.01,
        cpu_slowdown: 8.0,
    };
    let dims = BackboneDims {
        blocks: [(8, 16), (16, 8), (32, 4), (32, 2)].iter().map(|&(channels, resolution)| FeatureDims { channels, resolution }).collect(),
        num_classes: 8,
    };
    (SearchFactorRanges::with_blocks(4), profile, dims)
}

fn latency(c: &mut Criterion) {
    let (ranges, profile, dims) = fixture();
    let configs: Vec<_> = (0..256).map(|s| sample_random(&ranges, s)).collect();
    c.bench_function("closed_form_256", |b| {
        b.iter(|| configs.iter().map(|cfg| parallel_latency(black_box(cfg), &profile, &dims).unwrap()).sum::<f64>())
    });
    c.bench_function("event_replay_256", |b| {
        b.iter(|| configs.iter().map(|cfg| simulate_schedule(black_box(cfg), &profile, &dims).unwrap().makespan).sum::<f64>())
    });
    c.bench_function("memory_estimate_256", |b| b.iter(|| configs.iter().map(|cfg| estimate_memory(black_box(cfg), &dims).unwrap().total).sum::<u64>()));
}

fn front(c: &mut Criterion) {
    let reference = ReferencePoint { accuracy_floor: 0.0, latency_ceiling: 10.0 };
    for n in [16usize, 256, 4096] {
        // points on a convex trade-off curve, all non-dominated
        let pts: Vec<ObjectivePoint> = (0..n).map(|i| {
            let t = i as f64 / n as f64;
            ObjectivePoint::new(t, 1.0 + 8.0 * t * t)
        }).collect();
        c.bench_function(&format!("hypervolume_{n}"), |b| b.iter(|| hypervolume(black_box(&pts), reference).unwrap()));
    }
}

criterion_group!(benches, latency, front);
criterion_main!(benches);
