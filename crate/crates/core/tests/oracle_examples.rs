//! Worked examples checked against independent references: eigendecompositions,
//! bisection, scalar loops, finite differences, and direct recomputation.

use dmst_core::attention::{
    dmsa_layer_forward, dmsa_operator, mhsa_attention_weights, rope_precompute, token_update, DmsaLayerParams,
    MhsaParams,
};
use dmst_core::coding_rate::{
    grad_rate_variational_decoupled, logdet_psd, membership_from_subspaces, rate_reduction, rate_segmented,
    rate_subspace_bound, rate_total, rate_variational_coupled, rate_variational_decoupled, CodingRateConfig,
    Membership, SubspaceBank, TokenMatrix,
};
use dmst_core::memory::ActivationMeter;
use dmst_core::model::rng::{random_orthonormal, standard_normal};
use dmst_core::model::{generate_synthetic, SyntheticDatasetSpec};
use dmst_core::oracle;
use dmst_core::sparsify::{
    activate_membership, soft_threshold, soft_threshold_topk, sparse_subspace, ActivationKind, SparsityAxis,
};
use dmst_core::verify;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

fn tokens(z: &DMatrix<f64>) -> TokenMatrix {
    TokenMatrix::new(z.clone()).unwrap()
}

fn eigen_sum_log(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().map(|l| l.ln()).sum()
}

fn column_softmax(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = raw.clone();
    for mut col in out.column_iter_mut() {
        let s = oracle::softmax(col.as_slice());
        col.copy_from_slice(&s);
    }
    out
}

#[test]
fn logdet_of_random_gram_matches_eigenvalues() {
    let mut r = rng(1);
    let a = gaussian(5, 5, &mut r);
    let m = &a * a.transpose() + DMatrix::identity(5, 5);
    assert!((logdet_psd(&m).unwrap() - eigen_sum_log(&m)).abs() < 1e-9);
}

#[test]
fn total_rate_of_wide_matrix_matches_eigenvalues() {
    let mut r = rng(2);
    let z = gaussian(3, 5, &mut r);
    let eps = 0.5;
    let alpha = 3.0 / (5.0 * eps * eps);
    let lambda = SymmetricEigen::new(&z * z.transpose()).eigenvalues;
    let want = 0.5 * lambda.iter().map(|l| (1.0 + alpha * l).ln()).sum::<f64>();
    let got = rate_total(&tokens(&z), &CodingRateConfig::new(eps, 1.0).unwrap()).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn segmented_rate_matches_direct_logdet() {
    let mut r = rng(3);
    let (d, n, eps) = (4, 6, 1.0);
    let z = gaussian(d, n, &mut r);
    let pi = column_softmax(&gaussian(2, n, &mut r));
    let mut want = 0.0;
    for k in 0..2 {
        let nk: f64 = pi.row(k).sum();
        let gamma = d as f64 / (nk * eps * eps);
        let m = DMatrix::identity(d, d) + &z * DMatrix::from_diagonal(&pi.row(k).transpose()) * z.transpose() * gamma;
        want += 0.5 * oracle::logdet_eigen(&m);
    }
    let got = rate_segmented(&tokens(&z), &Membership::new(pi).unwrap(), &CodingRateConfig::default()).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn subspace_bound_on_coordinate_basis_reads_the_top_rows() {
    let mut r = rng(4);
    let (d, n, p, beta) = (6, 5, 2, 0.7);
    let z = gaussian(d, n, &mut r);
    let u = DMatrix::identity(d, p);
    let top = z.rows(0, p).into_owned();
    let want = 0.5 * oracle::logdet_eigen(&(DMatrix::identity(n, n) + top.transpose() * &top * beta));
    let got = rate_subspace_bound(
        &tokens(&z),
        &SubspaceBank::new(vec![u]).unwrap(),
        &CodingRateConfig::new(1.0, beta).unwrap(),
    )
    .unwrap();
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn subspace_bound_for_tokens_inside_the_first_subspace() {
    let mut r = rng(5);
    let (d, n, p) = (8, 5, 3);
    let q = random_orthonormal(d, 2 * p, &mut r).unwrap();
    let (u1, u2) = (q.columns(0, p).into_owned(), q.columns(p, p).into_owned());
    let z = &u1 * gaussian(p, n, &mut r);
    let want = 0.5 * oracle::logdet_eigen(&(DMatrix::identity(n, n) + z.transpose() * &z));
    let bank = SubspaceBank::orthonormal(vec![u1, u2]).unwrap();
    let got = rate_subspace_bound(&tokens(&z), &bank, &CodingRateConfig::default()).unwrap();
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn coupled_membership_matches_direct_softmax() {
    let mut r = rng(6);
    let z = gaussian(6, 7, &mut r);
    let bases: Vec<_> = (0..3).map(|_| gaussian(6, 2, &mut r)).collect();
    let got = membership_from_subspaces(&tokens(&z), &SubspaceBank::new(bases.clone()).unwrap(), 0.8).unwrap();
    let want = oracle::coupled_membership(&z, &bases, 0.8);
    assert!(got.is_column_stochastic(1e-12));
    assert!((got.matrix() - want).amax() < 1e-12);
}

#[test]
fn coupled_rate_with_identity_subspace() {
    let mut r = rng(7);
    let (d, n) = (4, 6);
    let z = gaussian(d, n, &mut r);
    let c = d as f64;
    let gram = &z * z.transpose();
    let want = 0.5 * (0..d).map(|i| (1.0 + c * gram[(i, i)] / n as f64).ln()).sum::<f64>();
    let bank = SubspaceBank::orthonormal(vec![DMatrix::identity(d, d)]).unwrap();
    let got = rate_variational_coupled(&tokens(&z), &bank, 1.0, &CodingRateConfig::default()).unwrap();
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn variational_rate_matches_scalar_loops() {
    let mut r = rng(8);
    let z = gaussian(7, 9, &mut r);
    let pi = DMatrix::from_fn(3, 9, |_, _| r.gen_range(0.0..1.0));
    let bases: Vec<_> = (0..3).map(|_| gaussian(7, 3, &mut r)).collect();
    let cfg = CodingRateConfig::new(0.8, 1.0).unwrap();
    let got = rate_variational_decoupled(
        &tokens(&z),
        &Membership::new(pi.clone()).unwrap(),
        &SubspaceBank::new(bases.clone()).unwrap(),
        &cfg,
    )
    .unwrap();
    let want = oracle::variational_rate(&z, &pi, &bases, 0.8);
    assert!(got >= 0.0 && got.is_finite());
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn sparsified_membership_and_subspaces_lower_the_rate() {
    let mut r = rng(9);
    let (d, n, p, k) = (8, 12, 2, 3);
    let q = random_orthonormal(d, k * p, &mut r).unwrap();
    let s = SubspaceBank::orthonormal((0..k).map(|i| q.columns(i * p, p).into_owned()).collect()).unwrap();
    let z = tokens(&gaussian(d, n, &mut r));
    let pi = membership_from_subspaces(&z, &s, 0.5).unwrap();
    assert!(pi.group_mass().iter().all(|&m| m > 1.0));
    let sel = sparse_subspace(&s, &pi, SparsityAxis::Both, k).unwrap();
    assert!(sel
        .membership
        .matrix()
        .iter()
        .zip(pi.matrix().iter())
        .all(|(a, b)| a <= b));
    let cfg = CodingRateConfig::default();
    let coupled = rate_variational_decoupled(&z, &pi, &s, &cfg).unwrap();
    let decoupled = rate_variational_decoupled(&z, &sel.membership, &sel.subspaces, &cfg).unwrap();
    assert!(decoupled < coupled, "{decoupled} !< {coupled}");
}

#[test]
fn reduction_recomposes_its_terms() {
    let mut r = rng(10);
    let z = tokens(&gaussian(6, 8, &mut r));
    let pi = Membership::new(DMatrix::from_fn(2, 8, |_, _| r.gen_range(0.0..1.0))).unwrap();
    let bank = SubspaceBank::new((0..2).map(|_| gaussian(6, 3, &mut r)).collect()).unwrap();
    let cfg = CodingRateConfig::default();
    let b = rate_reduction(&z, &pi, &bank, &cfg).unwrap();
    let total = rate_total(&z, &cfg).unwrap();
    let var = rate_variational_decoupled(&z, &pi, &bank, &cfg).unwrap();
    assert!((b.reduction - (total - var)).abs() < 1e-12);
    assert!((b.total_rate - total).abs() < 1e-12);
}

#[test]
fn gradient_matches_central_differences() {
    let mut r = rng(11);
    let (d, n, k, p) = (8, 6, 2, 4);
    let z = gaussian(d, n, &mut r);
    let pi = DMatrix::from_fn(k, n, |_, _| r.gen_range(0.05..1.0));
    let bases: Vec<_> = (0..k).map(|_| gaussian(d, p, &mut r) * 0.4).collect();
    let got = grad_rate_variational_decoupled(
        &tokens(&z),
        &Membership::new(pi.clone()).unwrap(),
        &SubspaceBank::new(bases.clone()).unwrap(),
        &CodingRateConfig::default(),
    )
    .unwrap();
    let fd = oracle::variational_rate_fd_grad(&z, &pi, &bases, 1.0, 1e-5);
    let rel = (&got - &fd).norm() / fd.norm();
    assert!(rel < 1e-5, "relative error {rel}");
}

#[test]
fn single_head_gradient_matches_hand_loops() {
    let mut r = rng(12);
    let (d, n, p) = (5, 7, 3);
    let z = gaussian(d, n, &mut r);
    let u = random_orthonormal(d, p, &mut r).unwrap();
    let c = d as f64;
    let nf = n as f64;
    let mut want = DMatrix::zeros(d, n);
    for i in 0..p {
        let proj: Vec<f64> = (0..n).map(|j| (0..d).map(|s| u[(s, i)] * z[(s, j)]).sum()).collect();
        let m: f64 = proj.iter().map(|x| x * x).sum::<f64>() / nf;
        let deriv = c / (1.0 + c * m);
        for rr in 0..d {
            for j in 0..n {
                want[(rr, j)] += deriv * u[(rr, i)] * proj[j] / nf;
            }
        }
    }
    let got = grad_rate_variational_decoupled(
        &tokens(&z),
        &Membership::uniform(1, n, 1.0).unwrap(),
        &SubspaceBank::orthonormal(vec![u]).unwrap(),
        &CodingRateConfig::default(),
    )
    .unwrap();
    assert!((got - want).amax() < 1e-9);
}

#[test]
fn soft_threshold_small_examples() {
    let p = soft_threshold(&[3.0, 1.0, 0.0]).unwrap();
    assert_eq!(p.values, vec![1.0, 0.0, 0.0]);
    assert!((p.threshold - 2.0).abs() < 1e-12);
    let check: f64 = [3.0f64, 1.0, 0.0].iter().map(|s| (s - p.threshold).max(0.0)).sum();
    assert!((check - 1.0).abs() < 1e-12);
    assert_eq!(oracle::simplex_bisection(&[3.0, 1.0, 0.0]), vec![1.0, 0.0, 0.0]);

    let t = soft_threshold_topk(&[0.9, 0.8, 0.1, 0.05], 2).unwrap();
    assert_eq!(t.support, vec![0, 1]);
    let want = oracle::simplex_topk_bisection(&[0.9, 0.8, 0.1, 0.05], 2);
    for (a, b) in t.values.iter().zip([0.55, 0.45, 0.0, 0.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in t.values.iter().zip(want) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn soft_threshold_membership_columns_match_bisection() {
    let mut r = rng(13);
    let raw = gaussian(5, 9, &mut r) * 2.0;
    let m = activate_membership(&raw, ActivationKind::SoftThreshold).unwrap();
    assert!(m.is_column_stochastic(1e-12));
    for (col, raw_col) in m.matrix().column_iter().zip(raw.column_iter()) {
        let want = oracle::simplex_bisection(raw_col.as_slice());
        for (a, b) in col.iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn head_gate_keeps_at_most_topk_heads() {
    let mut r = rng(14);
    let (k, d, n, topk) = (8, 16, 10, 4);
    let bank = SubspaceBank::new((0..k).map(|_| gaussian(d, 2, &mut r)).collect()).unwrap();
    let pi = Membership::new(DMatrix::from_fn(k, n, |_, _| r.gen_range(0.0..3.0))).unwrap();
    let sel = sparse_subspace(&bank, &pi, SparsityAxis::Head, topk).unwrap();
    let mean: Vec<f64> = pi.matrix().row_iter().map(|row| row.sum() / n as f64).collect();
    let gate = oracle::simplex_topk_bisection(&mean, topk);
    let nonzero = sel.subspaces.bases().iter().filter(|b| b.amax() > 0.0).count();
    assert!(nonzero <= topk);
    for (kk, (got, orig)) in sel.subspaces.bases().iter().zip(bank.bases()).enumerate() {
        assert!((got - orig * gate[kk]).amax() < 1e-12);
    }
}

#[test]
fn rope_preserves_shifted_inner_products() {
    let mut r = rng(15);
    let d = 8;
    let table = rope_precompute(64, d).unwrap();
    let q: Vec<f64> = (0..d).map(|_| standard_normal(&mut r)).collect();
    let k: Vec<f64> = (0..d).map(|_| standard_normal(&mut r)).collect();
    let dot_at = |m: usize, n: usize| {
        let (mut a, mut b) = (q.clone(), k.clone());
        table.rotate(&mut a, m, false);
        table.rotate(&mut b, n, false);
        a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
    };
    for (m, n, s) in [(3, 7, 5), (0, 10, 20), (12, 2, 31)] {
        assert!((dot_at(m, n) - dot_at(m + s, n + s)).abs() < 1e-9);
    }
}

#[test]
fn operator_is_negative_finite_difference_gradient() {
    let mut r = rng(16);
    let (d, n, k) = (8, 6, 2);
    let z = gaussian(d, n, &mut r);
    let pi = DMatrix::from_fn(k, n, |_, _| r.gen_range(0.05..1.0));
    let bases: Vec<_> = (0..k).map(|_| gaussian(d, 4, &mut r) * 0.4).collect();
    let op = dmsa_operator(
        &tokens(&z),
        &Membership::new(pi.clone()).unwrap(),
        &SubspaceBank::new(bases.clone()).unwrap(),
        &CodingRateConfig::default(),
    )
    .unwrap();
    let fd = -oracle::variational_rate_fd_grad(&z, &pi, &bases, 1.0, 1e-5);
    assert!((&op - &fd).norm() / fd.norm() < 1e-4);
}

#[test]
fn identity_single_head_layer_matches_loops() {
    let mut r = rng(17);
    let d = 4;
    let z = gaussian(d, 6, &mut r);
    let params = DmsaLayerParams {
        value_proj: DMatrix::identity(d, d),
        membership_proj: DMatrix::zeros(1, d),
        out_proj: DMatrix::identity(d, d),
        out_bias: DVector::zeros(d),
        rope: None,
        heads: 1,
        sparsity_axis: SparsityAxis::Head,
        topk: 1,
        activation: ActivationKind::SoftThreshold,
        epsilon_fold: false,
        coding: CodingRateConfig::default(),
    };
    let got = dmsa_layer_forward(&tokens(&z), &params).unwrap().into_matrix();
    let want = oracle::dmsa_layer_loops(&z, &params);
    assert!((got - want).amax() < 1e-6);
}

#[test]
fn layer_reduces_to_the_operator_in_the_faithful_configuration() {
    let report = verify::check_layer_vs_operator(20, 17);
    assert!(report.passed(), "{}", report.summary());
    assert!(report.worst < 1e-5);
}

#[test]
fn mhsa_scores_are_row_stochastic() {
    let mut r = rng(18);
    let params = MhsaParams::random(8, 2, 0.5, &mut r).unwrap();
    let z = tokens(&gaussian(8, 11, &mut r));
    let (weights, _) = mhsa_attention_weights(&z, &params, &mut ActivationMeter::new()).unwrap();
    for a in weights {
        for row in a.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn small_descent_step_does_not_raise_the_rate() {
    let mut r = rng(19);
    let cfg = CodingRateConfig::default();
    for _ in 0..20 {
        let z = tokens(&gaussian(6, 8, &mut r));
        let pi = Membership::new(DMatrix::from_fn(3, 8, |_, _| r.gen_range(0.0..1.0))).unwrap();
        let bank = SubspaceBank::new((0..3).map(|_| gaussian(6, 2, &mut r) * 0.4).collect()).unwrap();
        let next = token_update(&z, &pi, &bank, &cfg, 1e-3).unwrap();
        let before = rate_variational_decoupled(&z, &pi, &bank, &cfg).unwrap();
        let after = rate_variational_decoupled(&next, &pi, &bank, &cfg).unwrap();
        assert!(after <= before, "{after} > {before}");
    }
}

#[test]
fn synthetic_task_is_separable_by_nearest_subspace() {
    let spec = SyntheticDatasetSpec::default();
    assert_eq!((spec.dim, spec.subspace_dim, spec.num_classes), (32, 4, 4));
    assert!((spec.noise - 0.05).abs() < 1e-15);
    let data = generate_synthetic(&spec, 0).unwrap();
    let bases = data.bases.as_ref().unwrap();
    let correct = data
        .samples
        .iter()
        .filter(|s| oracle::nearest_subspace(&s.tokens, bases) == s.label)
        .count();
    let acc = correct as f64 / data.len() as f64;
    assert!(acc >= 0.99, "nearest-subspace accuracy {acc}");
}
