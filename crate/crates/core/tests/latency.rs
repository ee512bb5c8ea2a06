use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sidebranch_core::latency::{latency_ceiling, parallel_latency, sequential_baseline_latency, simulate_schedule, Resource, TeeCostCoeffs};
use sidebranch_core::search_space::{estimate_memory, sample_random};
use sidebranch_core::{BackboneDims, BlockSpec, Configuration, CostProfile, FeatureDims, OpType, SearchFactorRanges};

pub fn random_profile(rng: &mut ChaCha8Rng, blocks: usize) -> CostProfile {
    CostProfile {
        gpu_block_ms: (0..blocks).map(|_| rng.random_range(0.05..3.0)).collect(),
        adapter_ms: (0..blocks).map(|_| rng.random_range(0.0..0.3)).collect(),
        transfer_base_ms: rng.random_range(0.0..0.5),
        transfer_bandwidth_bytes_per_ms: rng.random_range(1e3..1e6),
        tee_cost_coeffs: TeeCostCoeffs { ms_per_mac: rng.random_range(0.0..1e-4), overhead_ms: rng.random_range(0.0..0.5) },
        classifier_ms: rng.random_range(0.0..0.1),
        cpu_slowdown: rng.random_range(1.0..16.0),
    }
}

fn dims(blocks: usize) -> BackboneDims {
    BackboneDims {
        blocks: (0..blocks).map(|l| FeatureDims { channels: (8usize << l.min(2)).min(32), resolution: (32 >> l).max(2) }).collect(),
        num_classes: 10,
    }
}

#[test]
fn closed_form_matches_event_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..1000u64 {
        let l = rng.random_range(1..7);
        let ranges = SearchFactorRanges::with_blocks(l);
        let profile = random_profile(&mut rng, l);
        let config = sample_random(&ranges, trial);
        let d = dims(l);
        let g = parallel_latency(&config, &profile, &d).unwrap();
        let m = simulate_schedule(&config, &profile, &d).unwrap().makespan;
        assert!((g - m).abs() < 1e-9, "trial {trial}: {g} vs {m}");
    }
}

#[test]
fn backbone_time_is_a_lower_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..1000u64 {
        let l = rng.random_range(1..7);
        let ranges = SearchFactorRanges::with_blocks(l);
        let profile = random_profile(&mut rng, l);
        let d = dims(l);
        let config = sample_random(&ranges, trial);
        assert!(parallel_latency(&config, &profile, &d).unwrap() >= profile.backbone_ms());
        let empty = ranges.minimum();
        assert_eq!(empty.active_count(), 0);
        assert_eq!(parallel_latency(&empty, &profile, &d).unwrap(), profile.backbone_ms());
    }
}

#[test]
fn ceiling_bounds_every_admissible_configuration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..300u64 {
        let ranges = SearchFactorRanges::with_blocks(4);
        let profile = random_profile(&mut rng, 4);
        let d = dims(4);
        let ceiling = latency_ceiling(&ranges, &profile, &d).unwrap();
        let g = parallel_latency(&sample_random(&ranges, trial), &profile, &d).unwrap();
        assert!(g < ceiling, "trial {trial}: {g} >= {ceiling}");
    }
}

fn one_block(op_type: OpType) -> BlockSpec {
    BlockSpec { op_type, spatial_down: 2, channel_down: 2, spatial_hidden: 8, channel_hidden: 8 }
}

#[test]
fn hand_worked_two_transfer_schedule() {
    // GPU 1,2,3 ms; adapters 0.5; transfers and TEE segments cost exactly 1 + 4 = 5 ms
    let profile = CostProfile {
        gpu_block_ms: vec![1.0, 2.0, 3.0],
        adapter_ms: vec![0.5; 3],
        transfer_base_ms: 1.0,
        transfer_bandwidth_bytes_per_ms: 1e300,
        tee_cost_coeffs: TeeCostCoeffs { ms_per_mac: 0.0, overhead_ms: 4.0 },
        classifier_ms: 0.25,
        cpu_slowdown: 2.0,
    };
    let d = dims(3);
    let config = Configuration { spatial_up: 4, channel_up: 16, blocks: vec![one_block(OpType::SpatialMixing), one_block(OpType::Inactive), one_block(OpType::ChannelMixing)] };
    // 1 + 0.5, then max(5, 2 + 3 + 0.5), then max(5, 0), then the classifier
    let expect = 1.5 + 5.5 + 5.0 + 0.25;
    assert!((parallel_latency(&config, &profile, &d).unwrap() - expect).abs() < 1e-12);
    let trace = simulate_schedule(&config, &profile, &d).unwrap();
    assert!((trace.makespan - expect).abs() < 1e-12);
    assert_eq!(trace.on(Resource::Link).count(), 2);
    // split after block 1: 1 ms on the GPU, then 2 * (2 + 3) on the CPU plus one transfer
    assert!((sequential_baseline_latency(1, &profile, &d).unwrap() - (1.0 + 1.0 + 10.0)).abs() < 1e-12);
    assert_eq!(sequential_baseline_latency(0, &profile, &d).unwrap(), 12.0);
}

#[test]
fn no_resource_runs_two_events_at_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..200u64 {
        let ranges = SearchFactorRanges::with_blocks(5);
        let profile = random_profile(&mut rng, 5);
        let trace = simulate_schedule(&sample_random(&ranges, trial), &profile, &dims(5)).unwrap();
        for r in [Resource::Gpu, Resource::Link, Resource::Cpu] {
            let ev: Vec<_> = trace.on(r).collect();
            for w in ev.windows(2) {
                assert!(w[1].start >= w[0].end - 1e-12, "trial {trial}: overlap on {}", r.name());
            }
        }
    }
}

#[test]
fn memory_grows_with_hidden_width() {
    let d = dims(3);
    let mut c = Configuration { spatial_up: 4, channel_up: 16, blocks: vec![one_block(OpType::ChannelMixing); 3] };
    let small = estimate_memory(&c, &d).unwrap().total;
    c.blocks[0].channel_hidden = 64;
    assert!(estimate_memory(&c, &d).unwrap().total > small);
}
