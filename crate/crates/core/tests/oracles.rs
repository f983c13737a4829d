use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scsm_core::autodiff::Graph;
use scsm_core::block::{ScsmBlock, ScsmConfig, Variant};
use scsm_core::csm::{channel_sequence_sensitivity, CsmConfig, CsmWeights};
use scsm_core::params::ParamStore;
use scsm_core::sfm::SfmConfig;
use scsm_core::ssm::{self, DiagStateMatrix, ZOH_SERIES_THRESHOLD};
use scsm_core::verify;
use scsm_core::Tensor;

/// `(e^z - 1) / z` by a compensated Taylor sum; accurate to a few ulps for
/// `|z| <= 1`.
fn phi_series(z: f64) -> f64 {
    let (mut sum, mut comp, mut term) = (1.0f64, 0.0f64, 1.0f64);
    for k in 2..60 {
        term *= z / k as f64;
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

fn discretize_one(a: f64, dt: f64, b: f64) -> (f64, f64) {
    let d = ssm::zoh_discretize(&DiagStateMatrix::new(vec![a]).unwrap(), &Tensor::new(&[1, 1, 1], vec![b]).unwrap(), dt)
        .unwrap();
    (d.a_d[0], d.b_d.data()[0])
}

#[test]
fn zoh_frozen_values() {
    // e^-1 and 1 - e^-1
    let (ad, bd) = discretize_one(-1.0, 1.0, 1.0);
    assert_eq!(ad, 0.36787944117144233);
    assert!((bd - 0.6321205588285577).abs() < 1e-16);
    // a = -2, dt = 0.5: (1 - e^-1) / 2 * 3
    let (_, bd) = discretize_one(-2.0, 0.5, 3.0);
    assert!((bd - 0.9481808382428366).abs() < 1e-15);
}

#[test]
fn zoh_matches_series_across_the_branch_boundary() {
    let mut worst: f64 = 0.0;
    for i in 0..2000 {
        // sweep |dt a| through the switch-over point
        let z = ZOH_SERIES_THRESHOLD * 10f64.powf(-1.0 + 2.0 * i as f64 / 2000.0);
        for a in [-0.5, -3.0, -40.0] {
            let dt = z / -a;
            let (ad, bd) = discretize_one(a, dt, 1.0);
            assert_eq!(ad, (dt * a).exp());
            let want = phi_series(dt * a) * dt;
            worst = worst.max((bd - want).abs() / want);
        }
    }
    assert!(worst <= 1e-12, "{worst:e}");
}

#[test]
fn zoh_oracle_over_random_pairs() {
    let start = std::time::Instant::now();
    let worst = verify::zoh_oracle(10_000, 7).unwrap();
    assert!(worst <= 1e-12, "{worst:e}");
    assert!(start.elapsed().as_secs_f64() < 1.0);
    // the sample covers the series branch
    let pairs = verify::zoh_pairs(10_000, 7);
    assert!(pairs.iter().any(|(a, dt)| (a * dt).abs() < ZOH_SERIES_THRESHOLD));
    assert!(pairs.iter().any(|(a, dt)| (a * dt).abs() >= ZOH_SERIES_THRESHOLD));
}

fn scan_case(batch: usize, l: usize, d: usize, seed: u64) -> (ssm::Discretized, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DiagStateMatrix::new((0..d).map(|_| -rng.gen_range(0.01..3.0)).collect()).unwrap();
    let disc = ssm::zoh_discretize(&a, &Tensor::randn(&[batch, l, d], &mut rng), rng.gen_range(0.1..1.0)).unwrap();
    (disc, Tensor::randn(&[batch, l, d], &mut rng), Tensor::randn(&[batch, l, d], &mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parallel_scan_equals_sequential(batch in 1usize..3, l in 1usize..1200, d in 1usize..9, seed in any::<u64>()) {
        let (disc, c, x) = scan_case(batch, l, d, seed);
        let seq = ssm::ssm_scan_sequential(&disc, &c, &x).unwrap();
        let par = ssm::ssm_scan_parallel(&disc, &c, &x).unwrap();
        prop_assert!(seq.max_abs_diff(&par) <= 1e-10);
    }

    #[test]
    fn scan_is_linear_in_x(l in 1usize..40, d in 1usize..5, s in -3.0f64..3.0, seed in any::<u64>()) {
        let (disc, c, x) = scan_case(1, l, d, seed);
        let y = ssm::ssm_scan_sequential(&disc, &c, &x).unwrap();
        let ys = ssm::ssm_scan_sequential(&disc, &c, &x.map(|v| v * s)).unwrap();
        prop_assert!(ys.max_abs_diff(&y.map(|v| v * s)) <= 1e-10 * (1.0 + s.abs()) * (1.0 + y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }
}

#[test]
fn scan_equivalence_at_full_size() {
    let start = std::time::Instant::now();
    let worst = verify::scan_equivalence(200, 4096, 64, 11).unwrap();
    assert!(worst <= 1e-10, "{worst:e}");
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn scan_worker_count_does_not_change_bits() {
    let (disc, c, x) = scan_case(2, 3000, 5, 3);
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| ssm::ssm_scan_parallel(&disc, &c, &x).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn unrolled_recurrence_matches_block_scan() {
    let worst = verify::unroll_oracle(60, 5).unwrap();
    assert!(worst <= 1e-10, "{worst:e}");
}

#[test]
fn fresh_blocks_are_identity_maps() {
    assert!(verify::identity_at_init(2).unwrap() <= 1e-15);
    // a non-square grid too
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let cfg = ScsmConfig { sfm: SfmConfig::new(8, 2, 1, false).unwrap(), csm: CsmConfig::new(2).unwrap(), variant: Variant::SfmCsm };
    let block = ScsmBlock::new(&mut store, "b", cfg, &mut rng).unwrap();
    let x = Tensor::randn(&[1, 8, 4, 4], &mut rng);
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let y = block.forward(&mut g, &store, xi).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn channel_sequence_is_causal() {
    let (upper, diag) = verify::causality(20, 8).unwrap();
    assert_eq!(upper, 0.0);
    assert!(diag > 0.0);
}

#[test]
fn sensitivity_reaches_back_past_the_conv_window() {
    // the scan carries state further than the width-4 conv
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let cfg = CsmConfig::new(2).unwrap();
    let w = CsmWeights::new(&mut store, "c", &cfg, &mut rng);
    verify::randomize(&mut store, &mut rng);
    let f = Tensor::randn(&[16, 1, 10], &mut rng);
    let m = channel_sequence_sensitivity(&store, &f, &w, &cfg).unwrap();
    assert!(m.at(&[9, 0]) > 0.0);
}
