//! Runnable invariant suites.
//!
//! Each check draws random instances from a seeded generator, compares the
//! production code against [`crate::oracle`] or a structural identity, and
//! returns a [`CheckReport`]. The first failing instance is serialized as
//! JSON so it can be replayed.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::attention::{
    dmsa_layer_forward, dmsa_layer_forward_traced, dmsa_operator, gated_channel_hadamard, gated_channel_with_gates,
    rope_precompute, token_update, DmsaLayerParams, DmsaOverrides, GatedChannelParams,
};
use crate::coding_rate::{
    membership_from_subspaces, rate_total, rate_variational_decoupled, CodingRateConfig, Membership, SubspaceBank,
    TokenMatrix,
};
use crate::error::{invalid, Result};
use crate::memory::ActivationMeter;
use crate::model::rng::{random_orthonormal, standard_normal};
use crate::model::{Model, ModelConfig, Tensor};
use crate::oracle;
use crate::sparsify::{soft_threshold, soft_threshold_topk, ActivationKind, SparsityAxis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Rates,
    Sparsify,
    Gradients,
    Equivalence,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Rates => "rates",
            Suite::Sparsify => "sparsify",
            Suite::Gradients => "gradients",
            Suite::Equivalence => "equivalence",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "rates" => Ok(Suite::Rates),
            "sparsify" => Ok(Suite::Sparsify),
            "gradients" => Ok(Suite::Gradients),
            "equivalence" => Ok(Suite::Equivalence),
            other => Err(invalid(format!("unknown suite '{other}'"))),
        }
    }
}

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub failures: usize,
    /// Worst observed error (or margin, for inequality checks).
    pub worst: f64,
    pub tolerance: f64,
    pub elapsed_secs: f64,
    /// Optional per-instance rows printed under the summary line.
    pub table: Vec<String>,
    /// First failing instance as JSON.
    pub failing_instance: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.instances > 0
    }

    pub fn summary(&self) -> String {
        format!(
            "[{}] {}: {}/{} instances ok, worst {:.3e} (tolerance {:.1e}), {:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances - self.failures,
            self.instances,
            self.worst,
            self.tolerance,
            self.elapsed_secs
        )
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{}", c.summary());
            for row in &c.table {
                let _ = writeln!(s, "    {row}");
            }
            if let Some(inst) = &c.failing_instance {
                let _ = writeln!(s, "    failing instance: {inst}");
            }
        }
        let passed = self.checks.iter().filter(|c| c.passed()).count();
        let _ = writeln!(s, "suite {}: {passed}/{} checks passed", self.suite, self.checks.len());
        s
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> SuiteReport {
    let mut checks = Vec::new();
    if matches!(suite, Suite::All | Suite::Sparsify) {
        checks.push(check_simplex_projection(10_000, seed));
        checks.push(check_topk_projection(2_000, seed));
    }
    if matches!(suite, Suite::All | Suite::Rates) {
        checks.push(check_rate_total(200, seed));
        checks.push(check_variational_rate(200, seed));
        checks.push(check_theorem1(1_000, seed));
    }
    if matches!(suite, Suite::All | Suite::Gradients) {
        checks.push(check_operator_gradient(50, seed));
        checks.push(check_descent(100, seed));
        checks.push(check_model_gradients(seed));
    }
    if matches!(suite, Suite::All | Suite::Equivalence) {
        checks.push(check_gated_equivalence(100, seed));
        checks.push(check_layer_vs_operator(50, seed));
        checks.push(check_layer_vs_loops(60, seed));
        checks.push(check_uniform_gate(50, seed));
    }
    SuiteReport { suite, checks }
}

/// Accumulates instance outcomes for one check.
struct Tally {
    name: &'static str,
    tolerance: f64,
    start: Instant,
    instances: usize,
    failures: usize,
    worst: f64,
    table: Vec<String>,
    failing_instance: Option<String>,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            start: Instant::now(),
            instances: 0,
            failures: 0,
            worst: 0.0,
            table: Vec::new(),
            failing_instance: None,
        }
    }

    /// Records an error value that must not exceed the tolerance.
    fn error(&mut self, err: f64, instance: impl FnOnce() -> serde_json::Value) {
        self.outcome(err <= self.tolerance, err, instance);
    }

    fn outcome(&mut self, ok: bool, value: f64, instance: impl FnOnce() -> serde_json::Value) {
        self.instances += 1;
        if value.is_nan() || value > self.worst {
            self.worst = value;
        }
        if !ok {
            self.failures += 1;
            if self.failing_instance.is_none() {
                self.failing_instance = Some(instance().to_string());
            }
        }
    }

    fn fault(&mut self, e: crate::Error, instance: impl FnOnce() -> serde_json::Value) {
        self.instances += 1;
        self.failures += 1;
        self.worst = f64::NAN;
        if self.failing_instance.is_none() {
            self.failing_instance = Some(json!({"error": e.to_string(), "instance": instance()}).to_string());
        }
    }

    fn finish(self) -> CheckReport {
        CheckReport {
            name: self.name.to_string(),
            instances: self.instances,
            failures: self.failures,
            worst: self.worst,
            tolerance: self.tolerance,
            elapsed_secs: self.start.elapsed().as_secs_f64(),
            table: self.table,
            failing_instance: self.failing_instance,
        }
    }
}

fn rng_for(seed: u64, check: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100 + check);
    rng
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

fn mat_json(m: &DMatrix<f64>) -> serde_json::Value {
    json!(m.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Max entrywise difference, relative to the larger magnitude when that exceeds one.
fn scaled_max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1.0);
    (a - b).amax() / scale
}

/// Soft threshold against bisection: nonnegative, sums to one, same values.
pub fn check_simplex_projection(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("soft threshold vs bisection oracle", 1e-9);
    let mut rng = rng_for(seed, 1);
    for _ in 0..count {
        let len = rng.gen_range(2..=64);
        let scale = 10f64.powf(rng.gen_range(-1.0..1.0));
        let s: Vec<f64> = (0..len).map(|_| scale * standard_normal(&mut rng)).collect();
        match soft_threshold(&s) {
            Ok(p) => {
                let oracle = oracle::simplex_bisection(&s);
                let sum_err = (p.values.iter().sum::<f64>() - 1.0).abs();
                let diff = p.values.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let negative = p.values.iter().any(|&v| v < 0.0);
                let err = if negative { f64::INFINITY } else { sum_err.max(diff) };
                t.error(err, || json!({"s": s}));
            }
            Err(e) => t.fault(e, || json!({"s": s})),
        }
    }
    t.finish()
}

/// Top-k restricted projection against restricted bisection.
pub fn check_topk_projection(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("top-k soft threshold vs restricted bisection", 1e-9);
    let mut rng = rng_for(seed, 2);
    for _ in 0..count {
        let len = rng.gen_range(1..=32);
        let k = rng.gen_range(1..=len);
        let s: Vec<f64> = (0..len).map(|_| standard_normal(&mut rng)).collect();
        match soft_threshold_topk(&s, k) {
            Ok(p) => {
                let oracle = oracle::simplex_topk_bisection(&s, k);
                let diff = p.values.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let sum_err = (p.values.iter().sum::<f64>() - 1.0).abs();
                let support_ok = p.support.len() <= k;
                t.error(if support_ok { diff.max(sum_err) } else { f64::INFINITY }, || json!({"s": s, "k": k}));
            }
            Err(e) => t.fault(e, || json!({"s": s, "k": k})),
        }
    }
    t.finish()
}

/// `R(Z)` against the eigenvalue oracle in the ambient dimension (covers both Gram forms).
pub fn check_rate_total(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("total rate vs eigenvalue oracle", 1e-9);
    let mut rng = rng_for(seed, 3);
    for _ in 0..count {
        let d = rng.gen_range(1..=16);
        let n = rng.gen_range(1..=24);
        let eps = rng.gen_range(0.3..2.0);
        let z = gaussian(d, n, &mut rng);
        let inst = || json!({"z": mat_json(&z), "epsilon": eps});
        let got = CodingRateConfig::new(eps, 1.0)
            .and_then(|cfg| rate_total(&TokenMatrix::new(z.clone())?, &cfg));
        match got {
            Ok(r) => {
                let want = oracle::rate_total_direct(&z, eps);
                t.error((r - want).abs() / want.abs().max(1.0), inst);
            }
            Err(e) => t.fault(e, inst),
        }
    }
    t.finish()
}

/// Variational rate against the scalar-loop oracle.
pub fn check_variational_rate(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("variational rate vs scalar loops", 1e-10);
    let mut rng = rng_for(seed, 4);
    let cfg = CodingRateConfig::default();
    for _ in 0..count {
        let (z, pi, bases) = random_variational_instance(&mut rng, 12, 10, 4);
        let inst = || instance_json(&z, &pi, &bases);
        let got = (|| {
            rate_variational_decoupled(
                &TokenMatrix::new(z.clone())?,
                &Membership::new(pi.clone())?,
                &SubspaceBank::new(bases.clone())?,
                &cfg,
            )
        })();
        match got {
            Ok(r) => {
                let want = oracle::variational_rate(&z, &pi, &bases, cfg.epsilon);
                t.error((r - want).abs() / want.abs().max(1.0), inst);
            }
            Err(e) => t.fault(e, inst),
        }
    }
    t.finish()
}

fn random_variational_instance(
    rng: &mut ChaCha8Rng,
    max_d: usize,
    max_n: usize,
    max_k: usize,
) -> (DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
    let d = rng.gen_range(2..=max_d);
    let n = rng.gen_range(2..=max_n);
    let k = rng.gen_range(1..=max_k);
    let p = rng.gen_range(1..=d);
    let z = gaussian(d, n, rng);
    let pi = DMatrix::from_fn(k, n, |_, _| rng.gen_range(0.05..1.0));
    let bases = (0..k).map(|_| gaussian(d, p, rng) * (1.0 / (d as f64).sqrt())).collect();
    (z, pi, bases)
}

fn instance_json(z: &DMatrix<f64>, pi: &DMatrix<f64>, bases: &[DMatrix<f64>]) -> serde_json::Value {
    json!({
        "z": mat_json(z),
        "pi": mat_json(pi),
        "bases": bases.iter().map(mat_json).collect::<Vec<_>>(),
    })
}

/// Theorem 1: the coupled variational rate strictly exceeds the decoupled one.
///
/// Instances: orthonormal, mutually orthogonal `S_k`; `Π` from the softmax
/// membership of `S`; `Π'` the per-head soft threshold of `Π` across tokens;
/// `U_k^S = g_k S_k` with `g` the soft threshold over heads of the mean `Π`.
/// Instances with some `n_k ≤ 1` are redrawn.
pub fn check_theorem1(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("coupled rate exceeds decoupled rate", 0.0);
    let mut rng = rng_for(seed, 5);
    let cfg = CodingRateConfig::default();
    let mut min_margin = f64::INFINITY;
    while t.instances < count {
        let k = rng.gen_range(2..=4);
        let p = rng.gen_range(1..=3);
        let d = rng.gen_range(k * p..=16.max(k * p));
        let n = rng.gen_range(2 * k..=24);
        let eta = rng.gen_range(0.1..2.0);
        let z = gaussian(d, n, &mut rng);
        let all = match random_orthonormal(d, k * p, &mut rng) {
            Ok(q) => q,
            Err(e) => {
                t.fault(e, || json!({"d": d, "k": k, "p": p}));
                continue;
            }
        };
        let s: Vec<DMatrix<f64>> = (0..k).map(|i| all.columns(i * p, p).into_owned()).collect();
        let result = (|| -> Result<Option<(f64, f64)>> {
            let zt = TokenMatrix::new(z.clone())?;
            let bank = SubspaceBank::orthonormal(s.clone())?;
            let pi = membership_from_subspaces(&zt, &bank, eta)?;
            if pi.group_mass().iter().any(|&m| m <= 1.0) {
                return Ok(None);
            }
            let mut sparse = pi.matrix().clone();
            for mut row in sparse.row_iter_mut() {
                let v: Vec<f64> = row.iter().copied().collect();
                for (dst, src) in row.iter_mut().zip(soft_threshold(&v)?.values) {
                    *dst = src;
                }
            }
            let mean: Vec<f64> = pi.matrix().row_iter().map(|r| r.sum() / n as f64).collect();
            let gate = soft_threshold(&mean)?.values;
            let coupled = rate_variational_decoupled(&zt, &pi, &bank, &cfg)?;
            let decoupled = rate_variational_decoupled(&zt, &Membership::new(sparse)?, &bank.scaled(&gate)?, &cfg)?;
            Ok(Some((coupled, decoupled)))
        })();
        let inst = || json!({"z": mat_json(&z), "bases": s.iter().map(mat_json).collect::<Vec<_>>(), "eta": eta});
        match result {
            Ok(None) => continue,
            Ok(Some((coupled, decoupled))) => {
                let margin = coupled - decoupled;
                min_margin = min_margin.min(margin);
                t.outcome(margin > 0.0, 0.0, inst);
            }
            Err(e) => t.fault(e, inst),
        }
    }
    t.table.push(format!("smallest margin coupled − decoupled: {min_margin:.3e}"));
    t.finish()
}

/// `dmsa_operator = −∇_Z R_cf^var` against central differences of the scalar-loop rate.
pub fn check_operator_gradient(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("DMSA operator vs −finite-difference gradient", 1e-4);
    let mut rng = rng_for(seed, 6);
    let cfg = CodingRateConfig::default();
    t.table.push(format!("{:>4} {:>3} {:>3} {:>3} {:>12}", "#", "d", "n", "K", "rel error"));
    for i in 0..count {
        let d = rng.gen_range(2..=16);
        let n = rng.gen_range(2..=12);
        let k = rng.gen_range(1..=4);
        let p = rng.gen_range(1..=d);
        let z = gaussian(d, n, &mut rng);
        let pi = DMatrix::from_fn(k, n, |_, _| rng.gen_range(0.05..1.0));
        let bases: Vec<DMatrix<f64>> = (0..k).map(|_| gaussian(d, p, &mut rng) * (1.0 / (d as f64).sqrt())).collect();
        let inst = || instance_json(&z, &pi, &bases);
        let got = (|| {
            dmsa_operator(
                &TokenMatrix::new(z.clone())?,
                &Membership::new(pi.clone())?,
                &SubspaceBank::new(bases.clone())?,
                &cfg,
            )
        })();
        match got {
            Ok(op) => {
                let fd = -oracle::variational_rate_fd_grad(&z, &pi, &bases, cfg.epsilon, 1e-5);
                let err = rel_diff(&op, &fd);
                t.table.push(format!("{i:>4} {d:>3} {n:>3} {k:>3} {err:>12.3e}"));
                t.error(err, inst);
            }
            Err(e) => t.fault(e, inst),
        }
    }
    t.finish()
}

/// A small step along the DMSA operator lowers the variational rate.
pub fn check_descent(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("token update decreases the variational rate", 0.0);
    let mut rng = rng_for(seed, 7);
    let cfg = CodingRateConfig::default();
    for _ in 0..count {
        let (z, pi, bases) = random_variational_instance(&mut rng, 12, 10, 4);
        let inst = || instance_json(&z, &pi, &bases);
        let result = (|| -> Result<(f64, f64)> {
            let zt = TokenMatrix::new(z.clone())?;
            let m = Membership::new(pi.clone())?;
            let bank = SubspaceBank::new(bases.clone())?;
            let grad_norm = dmsa_operator(&zt, &m, &bank, &cfg)?.norm();
            let step = 1e-3 * zt.matrix().norm() / grad_norm.max(1e-12);
            let next = token_update(&zt, &m, &bank, &cfg, step)?;
            Ok((
                rate_variational_decoupled(&zt, &m, &bank, &cfg)?,
                rate_variational_decoupled(&next, &m, &bank, &cfg)?,
            ))
        })();
        match result {
            Ok((before, after)) => t.outcome(after < before, (after - before).max(0.0), inst),
            Err(e) => t.fault(e, inst),
        }
    }
    t.finish()
}

/// Configuration of the tiny model used for the full gradient check:
/// depth 2, d = 16, K = 2, and n = 10 tokens (nine patches plus the class token).
pub fn gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig {
        depth: 2,
        dim: 16,
        heads: 2,
        topk: 2,
        mlp_ratio: 2.0,
        image_size: 3,
        patch_size: 1,
        token_dim: 6,
        num_classes: 3,
        seed,
        ..ModelConfig::default()
    }
}

/// Reverse-mode gradients of the tiny model against central differences (step 1e-4),
/// one relative error per parameter tensor.
pub fn check_model_gradients(seed: u64) -> CheckReport {
    let mut t = Tally::new("model gradients vs central differences", 1e-3);
    let mut rng = rng_for(seed, 8);
    for kind in [SparsityAxis::Head, SparsityAxis::Both] {
        let cfg = ModelConfig {
            sparsity_axis: kind,
            ..gradcheck_config(seed)
        };
        let mut model = match Model::init(&cfg) {
            Ok(m) => m,
            Err(e) => {
                t.fault(e, || json!({"config": format!("{cfg:?}")}));
                continue;
            }
        };
        // larger weights than the default init so every nonlinearity is exercised
        let decay: Vec<bool> = model.specs().iter().map(|s| s.decay || s.name == "cls_token").collect();
        for (p, d) in model.params_mut().iter_mut().zip(decay) {
            if d {
                p.scale_assign(15.0);
            }
        }
        let x = Tensor::from_fn(cfg.tokens(), cfg.token_dim, |_, _| standard_normal(&mut rng));
        let label = rng.gen_range(0..cfg.num_classes);
        let analytic = match model.loss_and_grad(&x, label) {
            Ok(g) => g.grads,
            Err(e) => {
                t.fault(e, || json!({"axis": kind.name()}));
                continue;
            }
        };
        let numeric = oracle::model_fd_grad(&model, &x, label, 1e-4);
        for ((spec, a), n) in model.specs().iter().zip(&analytic).zip(&numeric) {
            let diff: f64 = a.data().iter().zip(n.data()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            let scale = a.norm().max(n.norm());
            let err = if scale < 1e-10 { diff } else { diff / scale };
            t.table.push(format!("{:<6} {:<28} {:>10.3e} |g| {:.3e}", kind.name(), spec.name, err, a.norm()));
            t.error(err, || json!({"axis": kind.name(), "tensor": spec.name, "label": label, "input": x.data()}));
        }
    }
    t.finish()
}

/// Per-token gated bases `√G_kj W_S` against `Σ_k G_k ⊙ (W_S D_k W_Sᵀ Z)`.
pub fn check_gated_equivalence(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("gated channel: per-token bases vs Hadamard form", 1e-6);
    let mut rng = rng_for(seed, 9);
    let cfg = CodingRateConfig::default();
    for _ in 0..count {
        let d = rng.gen_range(2..=12);
        let p = rng.gen_range(1..=d);
        let k = rng.gen_range(1..=4);
        let n = rng.gen_range(2..=10);
        let z = gaussian(d, n, &mut rng);
        let result = (|| -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
            let params = GatedChannelParams::random(d, p, k, 1.0 / (d as f64).sqrt(), &mut rng)?;
            let zt = TokenMatrix::new(z.clone())?;
            let gates = params.gates(&zt)?;
            let a = gated_channel_with_gates(&zt, &params.shared_basis, &gates, &cfg)?;
            let b = gated_channel_hadamard(&zt, &params.shared_basis, &gates, &cfg)?;
            Ok((a, b, params.shared_basis, gates))
        })();
        match result {
            Ok((a, b, ws, g)) => {
                t.error(scaled_max_diff(&a, &b), || {
                    json!({"z": mat_json(&z), "w_s": mat_json(&ws), "gates": mat_json(&g)})
                });
            }
            Err(e) => t.fault(e, || json!({"z": mat_json(&z)})),
        }
    }
    t.finish()
}

/// The layer with value rows `U_kᵀ`, output projection `(g/n)[U_1 … U_K]`,
/// a zero membership projection (uniform gate `g = 1/K`), and an overridden
/// `Π` reproduces `dmsa_operator(Z, Π, g·U)`.
pub fn check_layer_vs_operator(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("DMSA layer reduces to the operator", 1e-6);
    let mut rng = rng_for(seed, 10);
    let cfg = CodingRateConfig::default();
    for _ in 0..count {
        let k = rng.gen_range(1..=4);
        let p = rng.gen_range(1..=4);
        let d = k * p;
        let n = rng.gen_range(2..=12);
        let z = gaussian(d, n, &mut rng);
        let pi = DMatrix::from_fn(k, n, |_, _| rng.gen_range(0.05..1.0));
        let bases: Vec<DMatrix<f64>> = (0..k).map(|_| gaussian(d, p, &mut rng) * (1.0 / (d as f64).sqrt())).collect();
        let g = 1.0 / k as f64;
        let result = (|| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            let mut value = DMatrix::zeros(d, d);
            let mut out = DMatrix::zeros(d, d);
            for (i, u) in bases.iter().enumerate() {
                value.rows_mut(i * p, p).copy_from(&u.transpose());
                out.columns_mut(i * p, p).copy_from(&(u * (g / n as f64)));
            }
            let params = DmsaLayerParams {
                value_proj: value,
                membership_proj: DMatrix::zeros(k, d),
                out_proj: out,
                out_bias: DVector::zeros(d),
                rope: None,
                heads: k,
                sparsity_axis: SparsityAxis::Head,
                topk: k,
                activation: ActivationKind::SoftThreshold,
                epsilon_fold: false,
                coding: cfg,
            };
            let zt = TokenMatrix::new(z.clone())?;
            let m = Membership::new(pi.clone())?;
            let overrides = DmsaOverrides {
                membership: Some(&m),
                head_gate: None,
            };
            let layer = dmsa_layer_forward_traced(&zt, &params, overrides, &mut ActivationMeter::new())?;
            let bank = SubspaceBank::new(bases.clone())?.scaled(&vec![g; k])?;
            Ok((layer.output.into_matrix(), dmsa_operator(&zt, &m, &bank, &cfg)?))
        })();
        let inst = || instance_json(&z, &pi, &bases);
        match result {
            Ok((a, b)) => t.error(rel_diff(&a, &b), inst),
            Err(e) => t.fault(e, inst),
        }
    }
    t.finish()
}

/// Layer forward against the entry-by-entry oracle across axes and activations.
pub fn check_layer_vs_loops(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("DMSA layer vs scalar-loop oracle", 1e-10);
    let mut rng = rng_for(seed, 11);
    let axes = [SparsityAxis::Head, SparsityAxis::Token, SparsityAxis::Both];
    for i in 0..count {
        let k = rng.gen_range(1..=4);
        let p = 2 * rng.gen_range(1..=3);
        let d = k * p;
        let n = rng.gen_range(2..=12);
        let z = gaussian(d, n, &mut rng);
        let axis = axes[i % 3];
        let activation = ActivationKind::ALL[(i / 3) % 4];
        let result = (|| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            let mut params = DmsaLayerParams::random(d, k, 1.0, &mut rng)?;
            params.rope = if i % 2 == 0 { Some(rope_precompute(n, d)?) } else { None };
            params.sparsity_axis = axis;
            params.activation = activation;
            params.topk = rng.gen_range(1..=k);
            params.epsilon_fold = i % 5 != 0;
            let got = dmsa_layer_forward(&TokenMatrix::new(z.clone())?, &params)?.into_matrix();
            Ok((got, oracle::dmsa_layer_loops(&z, &params)))
        })();
        let inst = || json!({"z": mat_json(&z), "axis": axis.name(), "activation": activation.name()});
        match result {
            Ok((a, b)) => t.error(scaled_max_diff(&a, &b), inst),
            Err(e) => t.fault(e, inst),
        }
    }
    t.finish()
}

/// Equal membership rows give a uniform gate; with `topk = K` nothing is
/// masked, so the layer equals the one with the gate fixed to `1/K`.
pub fn check_uniform_gate(count: usize, seed: u64) -> CheckReport {
    let mut t = Tally::new("uniform gate with topk = K masks nothing", 1e-12);
    let mut rng = rng_for(seed, 12);
    for _ in 0..count {
        let k = rng.gen_range(1..=6);
        let p = 2;
        let d = k * p;
        let n = rng.gen_range(2..=10);
        let z = gaussian(d, n, &mut rng);
        let result = (|| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            let mut params = DmsaLayerParams::random(d, k, 1.0, &mut rng)?;
            let row = params.membership_proj.row(0).into_owned();
            for mut r in params.membership_proj.row_iter_mut() {
                r.copy_from(&row);
            }
            params.topk = k;
            let zt = TokenMatrix::new(z.clone())?;
            let mut meter = ActivationMeter::new();
            let free = dmsa_layer_forward_traced(&zt, &params, DmsaOverrides::default(), &mut meter)?;
            let gate = vec![1.0 / k as f64; k];
            let fixed = DmsaOverrides {
                membership: None,
                head_gate: Some(&gate),
            };
            let pinned = dmsa_layer_forward_traced(&zt, &params, fixed, &mut meter)?;
            Ok((free.output.into_matrix(), pinned.output.into_matrix()))
        })();
        let inst = || json!({"z": mat_json(&z)});
        match result {
            Ok((a, b)) => t.error(scaled_max_diff(&a, &b), inst),
            Err(e) => t.fault(e, inst),
        }
    }
    t.finish()
}
