use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use sidebranch_core::latency::TeeCostCoeffs;
use sidebranch_core::moo::{
    fit_gp, hypervolume, hypervolume_clipped, nehvi_from_posterior, pareto_front, propose_batch, random_search, run_search,
    score, select_optimal, GpFitOptions, MooError, SearchJournal, SearchProblem, SearchState, StandardNormals,
};
use sidebranch_core::search_space::{encode, estimate_memory, MemoryFootprint};
use sidebranch_core::{
    BackboneDims, Configuration, CostProfile, EvaluationRecord, FeatureDims, ObjectivePoint, ReferencePoint, SearchFactorRanges,
    SearchSettings,
};

fn record(index: usize, accuracy: f64, latency_ms: f64) -> EvaluationRecord {
    EvaluationRecord {
        index,
        config: SearchFactorRanges::default().minimum(),
        encoded: vec![],
        objectives: Some(ObjectivePoint::new(accuracy, latency_ms)),
        memory: MemoryFootprint { parameter_bytes: 0, peak_activation_bytes: 0, total: 0 },
        feasible: true,
        failure: None,
        epoch_seed: 0,
    }
}

fn brute_force(points: &[(f64, f64)]) -> Vec<usize> {
    let mut kept = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let pi = ObjectivePoint::new(p.0, p.1);
        let dominated = points.iter().any(|q| ObjectivePoint::new(q.0, q.1).dominates(&pi));
        let earlier_twin = points[..i].iter().any(|q| *q == *p);
        if !dominated && !earlier_twin {
            kept.push(i);
        }
    }
    kept
}

const REF: ReferencePoint = ReferencePoint { accuracy_floor: 0.0, latency_ceiling: 20.0 };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn front_matches_brute_force(pts in prop::collection::vec((0u32..50, 1u32..40), 1..500)) {
        // coarse grid so ties and duplicates are common
        let pts: Vec<(f64, f64)> = pts.iter().map(|&(a, l)| (a as f64 / 50.0, l as f64 / 2.0)).collect();
        let recs: Vec<EvaluationRecord> = pts.iter().enumerate().map(|(i, p)| record(i, p.0, p.1)).collect();
        let front = pareto_front(&recs, REF).unwrap();
        let got: Vec<usize> = front.records.iter().map(|r| r.index).collect();
        prop_assert_eq!(got, brute_force(&pts));
    }

    #[test]
    fn hypervolume_is_monotone(pts in prop::collection::vec((0.0f64..1.0, 0.5f64..20.0), 0..40), extra in (0.0f64..1.0, 0.5f64..20.0)) {
        let mut p: Vec<ObjectivePoint> = pts.iter().map(|&(a, l)| ObjectivePoint::new(a, l)).collect();
        let before = hypervolume(&p, REF).unwrap();
        p.push(ObjectivePoint::new(extra.0, extra.1));
        prop_assert!(hypervolume(&p, REF).unwrap() >= before - 1e-12);
    }

    #[test]
    fn selection_invariant_under_affine_rescaling(
        pts in prop::collection::vec((0.0f64..1.0, 0.5f64..20.0), 1..30),
        scale in 0.1f64..10.0,
        shift in -0.4f64..5.0,
        alpha in 0.0f64..=1.0,
    ) {
        let recs: Vec<EvaluationRecord> = pts.iter().enumerate().map(|(i, p)| {
            let mut r = record(i, p.0, p.1);
            r.config.spatial_up = i;
            r
        }).collect();
        let a = select_optimal(&pareto_front(&recs, REF).unwrap(), alpha).unwrap();
        let scaled: Vec<EvaluationRecord> = recs.iter().map(|r| {
            let o = r.objectives.unwrap();
            let mut r = r.clone();
            r.objectives = Some(ObjectivePoint::new(o.accuracy * 0.5 + 0.1, o.latency_ms * scale + shift.max(-0.4)));
            r
        }).collect();
        let wide = ReferencePoint { accuracy_floor: 0.0, latency_ceiling: 1e6 };
        let b = select_optimal(&pareto_front(&scaled, wide).unwrap(), alpha).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn hypervolume_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let pts: Vec<ObjectivePoint> =
            (0..rng.random_range(1..15)).map(|_| ObjectivePoint::new(rng.random::<f64>(), rng.random_range(0.5..20.0))).collect();
        let exact = hypervolume(&pts, REF).unwrap();
        let n = 1_000_000;
        let area = 20.0;
        let mut hits = 0usize;
        for _ in 0..n {
            let (a, l) = (rng.random::<f64>(), rng.random::<f64>() * 20.0);
            if pts.iter().any(|p| p.accuracy >= a && p.latency_ms <= l) {
                hits += 1;
            }
        }
        let frac = hits as f64 / n as f64;
        let est = frac * area;
        let sigma = area * (frac * (1.0 - frac) / n as f64).sqrt();
        assert!((est - exact).abs() <= 3.0 * sigma.max(1e-9), "{est} vs {exact} (sigma {sigma})");
    }
}

#[test]
fn three_point_tie_example_selects_higher_accuracy() {
    let recs = vec![record(0, 0.9, 10.0), record(1, 0.8, 6.0), record(2, 0.7, 12.0)];
    let mut recs = recs;
    recs[1].config.spatial_up = 8;
    let front = pareto_front(&recs, REF).unwrap();
    assert_eq!(score(&front, 0.5), vec![0.5, 0.5]);
    assert_eq!(select_optimal(&front, 0.5).unwrap(), recs[0].config);
}

/// E[X 1{a < X < b}] for X ~ N(mu, sd^2).
fn partial_mean(mu: f64, sd: f64, a: f64, b: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let (za, zb) = ((a - mu) / sd, (b - mu) / sd);
    mu * (n.cdf(zb) - n.cdf(za)) + sd * (n.pdf(za) - n.pdf(zb))
}

fn prob(mu: f64, sd: f64, a: f64, b: f64) -> f64 {
    let n = Normal::new(mu, sd).unwrap();
    n.cdf(b) - n.cdf(a)
}

/// Expected 2-D hypervolume gain of an independent Gaussian candidate over the single point
/// `(a0, l0)`, with gains outside the reference box counted as zero.
fn closed_form_ehvi(a0: f64, l0: f64, fm: f64, fs: f64, gm: f64, gs: f64, r: f64) -> f64 {
    let inf = f64::INFINITY;
    // gain = f (R - g) - min(a0, f) (R - max(l0, g)) on f >= 0, g <= R
    let e_f = partial_mean(fm, fs, 0.0, inf);
    let e_rg = r * prob(gm, gs, -inf, r) - partial_mean(gm, gs, -inf, r);
    let e_min = partial_mean(fm, fs, 0.0, a0) + a0 * prob(fm, fs, a0, inf);
    let e_rmax = (r - l0) * prob(gm, gs, -inf, l0) + r * prob(gm, gs, l0, r) - partial_mean(gm, gs, l0, r);
    e_f * e_rg - e_min * e_rmax
}

#[test]
fn nehvi_matches_closed_form_for_one_point_front() {
    let r = 12.0;
    let reference = ReferencePoint { accuracy_floor: 0.0, latency_ceiling: r };
    let cases = [(0.8, 6.0, 0.75, 0.1, 5.0, 1.5), (0.5, 4.0, 0.6, 0.2, 7.0, 2.0), (0.9, 3.0, 0.85, 0.05, 3.5, 0.5)];
    for (i, &(a0, l0, fm, fs, gm, gs)) in cases.iter().enumerate() {
        let cov = |s: f64| DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, s * s]);
        let normals = StandardNormals::draw(100_000, 2, i as u64);
        let mc = nehvi_from_posterior(&[a0, fm], &cov(fs), &[l0, gm], &cov(gs), reference, &normals);
        let exact = closed_form_ehvi(a0, l0, fm, fs, gm, gs, r);
        assert!(exact > 0.0);
        assert!((mc - exact).abs() <= 0.02 * exact, "case {i}: {mc} vs {exact}");
    }
}

fn uniform_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
}

#[test]
fn irrelevant_coordinates_get_longer_lengthscales() {
    let x = uniform_points(60, 12, 3);
    let y: Vec<f64> = x.iter().map(|v| (4.0 * v[0]).sin() + 2.0 * (v[1] - 0.5).powi(2)).collect();
    let gp = fit_gp(&x, &y, &GpFitOptions::default()).unwrap();
    let relevant = gp.lengthscales[0].max(gp.lengthscales[1]);
    for (i, l) in gp.lengthscales.iter().enumerate().skip(2) {
        assert!(*l > relevant, "coordinate {i}: {l} <= {relevant} ({:?})", gp.lengthscales);
    }
}

fn matern(a: &[f64], b: &[f64], ls: &[f64], s2: f64) -> f64 {
    let r = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum::<f64>().sqrt();
    let q = 5f64.sqrt() * r;
    s2 * (1.0 + q + q * q / 3.0) * (-q).exp()
}

#[test]
fn posterior_matches_dense_solve() {
    let x = uniform_points(20, 4, 8);
    let y: Vec<f64> = x.iter().map(|v| v[0] * 3.0 - v[1] * v[2] + 0.05 * (17.0 * v[3]).sin()).collect();
    let gp = fit_gp(&x, &y, &GpFitOptions { noise_floor: 1e-4, ..Default::default() }).unwrap();
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let sd = (y.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let ys = DVector::from_iterator(n, y.iter().map(|t| (t - mean) / sd));
    let (ls, s2, noise) = (&gp.lengthscales, gp.signal_variance, gp.noise_variance);
    let mut k = DMatrix::from_fn(n, n, |i, j| matern(&x[i], &x[j], ls, s2));
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let lu = k.lu();
    for t in uniform_points(10, 4, 9) {
        let ks = DVector::from_iterator(n, x.iter().map(|xi| matern(xi, &t, ls, s2)));
        let w = lu.solve(&ks).unwrap();
        let m = mean + sd * w.dot(&ys);
        let v = sd * sd * (s2 - w.dot(&ks));
        let (gm, gv) = gp.predict(&t).unwrap();
        assert!((gm - m).abs() < 1e-8, "{gm} vs {m}");
        assert!((gv - v).abs() < 1e-8, "{gv} vs {v}");
    }
}

fn fixture() -> (SearchFactorRanges, CostProfile, BackboneDims) {
    let ranges = SearchFactorRanges::with_blocks(3);
    let profile = CostProfile {
        gpu_block_ms: vec![1.0, 1.5, 2.0],
        adapter_ms: vec![0.2, 0.2, 0.2],
        transfer_base_ms: 0.1,
        transfer_bandwidth_bytes_per_ms: 1e5,
        tee_cost_coeffs: TeeCostCoeffs { ms_per_mac: 2e-5, overhead_ms: 0.05 },
        classifier_ms: 0.01,
        cpu_slowdown: 8.0,
    };
    let dims = BackboneDims {
        blocks: vec![
            FeatureDims { channels: 8, resolution: 16 },
            FeatureDims { channels: 16, resolution: 8 },
            FeatureDims { channels: 32, resolution: 4 },
        ],
        num_classes: 10,
    };
    (ranges, profile, dims)
}

#[test]
fn proposals_never_repeat_or_duplicate() {
    let (ranges, profile, dims) = fixture();
    let problem = SearchProblem { ranges: &ranges, profile: &profile, io_dims: &dims };
    let settings = SearchSettings { h_limit_bytes: 60_000, pool_size: 24, mc_samples: 8, ..Default::default() };
    let reference = problem.reference_point().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000u64 {
        let mut state = SearchState::new(reference);
        let init = propose_batch(&problem, &state, &settings, rng.random_range(2..8), trial).unwrap();
        for (i, c) in init.iter().enumerate() {
            let mut r = record(i, rng.random(), rng.random_range(1.0..20.0));
            r.encoded = encode(c, &ranges).unwrap();
            r.config = c.clone();
            state.push(r);
        }
        // surrogates on every tenth trial keep the sweep affordable
        if trial % 10 == 0 {
            let opts = GpFitOptions { restarts: 1, iterations: 30, ..Default::default() };
            state.gp_accuracy = sidebranch_core::moo::fit_gp_records(&state.records, sidebranch_core::moo::Objective::Accuracy, &opts).ok();
            state.gp_latency = sidebranch_core::moo::fit_gp_records(&state.records, sidebranch_core::moo::Objective::Latency, &opts).ok();
        }
        let batch = propose_batch(&problem, &state, &settings, rng.random_range(1..6), trial + 7).unwrap();
        let mut keys: Vec<String> = batch.iter().map(Configuration::key).collect();
        for k in &keys {
            assert!(!state.records.iter().any(|r| r.config.key() == *k), "trial {trial}: repeated {k}");
        }
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), batch.len(), "trial {trial}: duplicate in batch");
        for c in &batch {
            assert!(estimate_memory(c, &dims).unwrap().total <= settings.h_limit_bytes);
        }
    }
}

#[test]
fn tiny_memory_budget_exhausts_pool() {
    let (ranges, profile, dims) = fixture();
    let problem = SearchProblem { ranges: &ranges, profile: &profile, io_dims: &dims };
    let settings = SearchSettings { h_limit_bytes: 8, ..Default::default() };
    let state = SearchState::new(problem.reference_point().unwrap());
    assert!(matches!(propose_batch(&problem, &state, &settings, 4, 0), Err(MooError::Exhausted { .. })));
}

fn smooth(config: &Configuration, _seed: u64) -> Result<f64, String> {
    let x = encode(config, &SearchFactorRanges::with_blocks(3)).map_err(|e| e.to_string())?;
    Ok(0.9 * (-x.iter().map(|v| (v - 0.6).powi(2)).sum::<f64>() / 4.0).exp())
}

#[test]
fn zero_iterations_gives_front_over_init_samples() {
    let (ranges, profile, dims) = fixture();
    let problem = SearchProblem { ranges: &ranges, profile: &profile, io_dims: &dims };
    let settings = SearchSettings { h_limit_bytes: 1 << 20, iterations: 0, init_samples: 7, ..Default::default() };
    let out = run_search(&problem, &smooth, &settings, &mut SearchJournal::in_memory()).unwrap();
    assert_eq!(out.records.len(), 7);
    let rs = random_search(&problem, &smooth, &settings, 7).unwrap();
    assert_eq!(rs.records, out.records);
    assert_eq!(out.front, pareto_front(&out.records, out.front.reference_point).unwrap());
    assert!(hypervolume_clipped(&out.front.points(), out.front.reference_point) > 0.0);
}
