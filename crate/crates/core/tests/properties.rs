//! Randomized invariants.

use dmst_core::attention::{gated_channel_hadamard, gated_channel_with_gates, rope_precompute, token_update, GatedChannelParams};
use dmst_core::coding_rate::{
    rate_total, rate_variational_decoupled, CodingRateConfig, Membership, SubspaceBank, TokenMatrix,
};
use dmst_core::model::rng::{random_orthonormal, standard_normal};
use dmst_core::oracle;
use dmst_core::sparsify::soft_threshold;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

fn finite_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn soft_threshold_ignores_constant_shifts(s in finite_vec(32), shift in -100.0f64..100.0) {
        let a = soft_threshold(&s).unwrap();
        let shifted: Vec<f64> = s.iter().map(|v| v + shift).collect();
        let b = soft_threshold(&shifted).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_threshold_preserves_order(s in finite_vec(32)) {
        let p = soft_threshold(&s).unwrap().values;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] >= s[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn soft_threshold_lands_on_the_simplex(s in finite_vec(64)) {
        let p = soft_threshold(&s).unwrap().values;
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (a, b) in p.iter().zip(oracle::simplex_bisection(&s)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn both_gram_forms_share_a_log_determinant(seed in any::<u64>(), d in 1usize..12, n in 1usize..12, eps in 0.3f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(d, n, &mut rng);
        let alpha = d as f64 / (n as f64 * eps * eps);
        let small = oracle::logdet_eigen(&(DMatrix::identity(d, d) + &z * z.transpose() * alpha));
        let large = oracle::logdet_eigen(&(DMatrix::identity(n, n) + z.transpose() * &z * alpha));
        prop_assert!((small - large).abs() < 1e-9 * small.abs().max(1.0));
        let r = rate_total(&TokenMatrix::new(z).unwrap(), &CodingRateConfig::new(eps, 1.0).unwrap()).unwrap();
        prop_assert!((r - 0.5 * small).abs() < 1e-9 * r.abs().max(1.0));
    }

    #[test]
    fn total_rate_is_rotation_invariant(seed in any::<u64>(), d in 1usize..10, n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(d, n, &mut rng);
        let q = random_orthonormal(d, d, &mut rng).unwrap();
        let cfg = CodingRateConfig::default();
        let a = rate_total(&TokenMatrix::new(z.clone()).unwrap(), &cfg).unwrap();
        let b = rate_total(&TokenMatrix::new(q * &z).unwrap(), &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        prop_assert!(a >= 0.0);
        let r = random_orthonormal(n, n, &mut rng).unwrap();
        let c = rate_total(&TokenMatrix::new(z * r).unwrap(), &cfg).unwrap();
        prop_assert!((a - c).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn small_steps_descend(seed in any::<u64>(), d in 2usize..10, n in 2usize..10, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = TokenMatrix::new(gaussian(d, n, &mut rng)).unwrap();
        let pi = Membership::new(DMatrix::from_fn(k, n, |_, _| rng.gen_range(0.05..1.0))).unwrap();
        let bank = SubspaceBank::new((0..k).map(|_| gaussian(d, 2.min(d), &mut rng) * 0.5).collect()).unwrap();
        let cfg = CodingRateConfig::default();
        let next = token_update(&z, &pi, &bank, &cfg, 1e-4).unwrap();
        let before = rate_variational_decoupled(&z, &pi, &bank, &cfg).unwrap();
        let after = rate_variational_decoupled(&next, &pi, &bank, &cfg).unwrap();
        prop_assert!(after <= before);
    }

    #[test]
    fn gated_forms_agree(seed in any::<u64>(), d in 2usize..10, n in 2usize..10, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.gen_range(1..=d);
        let params = GatedChannelParams::random(d, p, k, 0.5, &mut rng).unwrap();
        let z = TokenMatrix::new(gaussian(d, n, &mut rng)).unwrap();
        let gates = params.gates(&z).unwrap();
        let cfg = CodingRateConfig::default();
        let a = gated_channel_with_gates(&z, &params.shared_basis, &gates, &cfg).unwrap();
        let b = gated_channel_hadamard(&z, &params.shared_basis, &gates, &cfg).unwrap();
        prop_assert!((a - b).amax() < 1e-6);
    }

    #[test]
    fn rope_is_an_isometry_with_relative_phase(seed in any::<u64>(), half in 1usize..8, m in 0usize..40, n in 0usize..40, s in 0usize..20) {
        let d = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = rope_precompute(64, d).unwrap();
        let q: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let k: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let rot = |v: &[f64], pos: usize| {
            let mut v = v.to_vec();
            table.rotate(&mut v, pos, false);
            v
        };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        prop_assert!((norm(&rot(&q, m)) - norm(&q)).abs() < 1e-9);
        prop_assert!((dot(&rot(&q, m), &rot(&k, n)) - dot(&rot(&q, m + s), &rot(&k, n + s))).abs() < 1e-9);
        let mut back = rot(&q, m);
        table.rotate(&mut back, m, true);
        for (a, b) in back.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_row_layout_round_trips(seed in any::<u64>(), d in 1usize..8, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<f64> = (0..d * n).map(|_| standard_normal(&mut rng)).collect();
        let t = TokenMatrix::from_token_rows(&rows, n, d).unwrap();
        prop_assert_eq!(t.dim(), d);
        prop_assert_eq!(t.tokens(), n);
        prop_assert_eq!(t.matrix()[(d - 1, 0)], rows[d - 1]);
        prop_assert_eq!(t.to_token_rows(), rows);
    }
}
