//! Slow, independent reference implementations used to check the fast paths.
//!
//! Everything here is written with explicit scalar loops or a different
//! algorithm from the production code: eigenvalues instead of Cholesky,
//! bisection instead of sort-and-scan, central differences instead of
//! analytic gradients.

use nalgebra::DMatrix;

use crate::attention::{DmsaLayerParams, ROPE_BASE};
use crate::model::{Model, Tensor};
use crate::sparsify::ActivationKind;

/// `log det M` from the eigenvalues of a symmetric positive definite `M`.
pub fn logdet_eigen(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().map(|l| l.ln()).sum()
}

/// `½ log det(I_d + d/(nε²) Z Zᵀ)` in the ambient dimension.
pub fn rate_total_direct(z: &DMatrix<f64>, epsilon: f64) -> f64 {
    let (d, n) = z.shape();
    let alpha = d as f64 / (n as f64 * epsilon * epsilon);
    let m = DMatrix::identity(d, d) + z * z.transpose() * alpha;
    0.5 * logdet_eigen(&m)
}

/// Simplex projection by bisection on the threshold.
pub fn simplex_bisection(s: &[f64]) -> Vec<f64> {
    let idx: Vec<usize> = (0..s.len()).collect();
    restricted_bisection(s, &idx)
}

/// Simplex projection restricted to the `k` largest entries (ties to the lower index).
pub fn simplex_topk_bisection(s: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    // selection by repeated maximum search rather than sorting
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = usize::MAX;
        for &i in &idx {
            if best == usize::MAX || s[i] > s[best] {
                best = i;
            }
        }
        chosen.push(best);
        idx.retain(|&i| i != best);
    }
    restricted_bisection(s, &chosen)
}

fn restricted_bisection(s: &[f64], allowed: &[usize]) -> Vec<f64> {
    let mass = |tau: f64| allowed.iter().map(|&i| (s[i] - tau).max(0.0)).sum::<f64>();
    let hi0 = allowed.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (hi0 - 1.0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let mut out = vec![0.0; s.len()];
    for &i in allowed {
        out[i] = (s[i] - tau).max(0.0);
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `π_kj = softmax_k(‖U_kᵀ z_j‖² / 2η)`, `K × n`.
pub fn coupled_membership(z: &DMatrix<f64>, bases: &[DMatrix<f64>], eta: f64) -> DMatrix<f64> {
    let (d, n) = z.shape();
    let mut pi = DMatrix::zeros(bases.len(), n);
    for j in 0..n {
        let energies: Vec<f64> = bases
            .iter()
            .map(|u| {
                (0..u.ncols())
                    .map(|a| {
                        let c: f64 = (0..d).map(|i| u[(i, a)] * z[(i, j)]).sum();
                        c * c
                    })
                    .sum::<f64>()
                    / (2.0 * eta)
            })
            .collect();
        for (k, v) in softmax(&energies).into_iter().enumerate() {
            pi[(k, j)] = v;
        }
    }
    pi
}

/// `½ Σ_k (n_k/n) Σ_i ln(1 + (d/ε²)·(1/n_k) Σ_j π_kj (u_kiᵀ z_j)²)` with scalar loops.
pub fn variational_rate(z: &DMatrix<f64>, pi: &DMatrix<f64>, bases: &[DMatrix<f64>], epsilon: f64) -> f64 {
    let (d, n) = z.shape();
    let c = d as f64 / (epsilon * epsilon);
    let mut total = 0.0;
    for (k, u) in bases.iter().enumerate() {
        let nk: f64 = (0..n).map(|j| pi[(k, j)]).sum();
        if nk <= 1e-12 {
            continue;
        }
        for a in 0..u.ncols() {
            let mut acc = 0.0;
            for j in 0..n {
                let proj: f64 = (0..d).map(|i| u[(i, a)] * z[(i, j)]).sum();
                acc += pi[(k, j)] * proj * proj;
            }
            total += 0.5 * nk / n as f64 * (1.0 + c * acc / nk).ln();
        }
    }
    total
}

/// Central-difference gradient of [`variational_rate`] in `Z`, membership held fixed.
pub fn variational_rate_fd_grad(
    z: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    bases: &[DMatrix<f64>],
    epsilon: f64,
    h: f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
        let mut plus = z.clone();
        plus[(i, j)] += h;
        let mut minus = z.clone();
        minus[(i, j)] -= h;
        (variational_rate(&plus, pi, bases, epsilon) - variational_rate(&minus, pi, bases, epsilon)) / (2.0 * h)
    })
}

fn activate_scalar(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        ActivationKind::Relu => x.max(0.0),
        ActivationKind::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        ActivationKind::SoftThreshold => unreachable!("not elementwise"),
    }
}

/// DMSA layer forward in the `d × n` convention, written out entry by entry.
/// A rotary table, when present, is assumed to be the standard one.
pub fn dmsa_layer_loops(z: &DMatrix<f64>, params: &DmsaLayerParams) -> DMatrix<f64> {
    let (d, n) = z.shape();
    let heads = params.heads;
    let p = d / heads;

    let mut zr = z.clone();
    if params.rope.is_some() {
        for j in 0..n {
            for pair in 0..d / 2 {
                let theta = j as f64 * ROPE_BASE.powf(-2.0 * pair as f64 / d as f64);
                let (a, b) = (z[(2 * pair, j)], z[(2 * pair + 1, j)]);
                zr[(2 * pair, j)] = a * theta.cos() - b * theta.sin();
                zr[(2 * pair + 1, j)] = a * theta.sin() + b * theta.cos();
            }
        }
    }
    let mut s = DMatrix::<f64>::zeros(d, n);
    let mut logits = DMatrix::<f64>::zeros(heads, n);
    for j in 0..n {
        for r in 0..d {
            s[(r, j)] = (0..d).map(|c| params.value_proj[(r, c)] * z[(c, j)]).sum();
        }
        for k in 0..heads {
            logits[(k, j)] = (0..d).map(|c| params.membership_proj[(k, c)] * zr[(c, j)]).sum();
        }
    }

    let gate: Vec<f64> = if params.sparsity_axis.gates_heads() {
        let mean: Vec<f64> = (0..heads)
            .map(|k| (0..n).map(|j| logits[(k, j)]).sum::<f64>() / n as f64)
            .collect();
        match params.activation {
            ActivationKind::SoftThreshold => simplex_topk_bisection(&mean, params.topk),
            kind => mean.iter().map(|&x| activate_scalar(kind, x)).collect(),
        }
    } else {
        vec![1.0; heads]
    };

    let mut pi = DMatrix::<f64>::zeros(heads, n);
    for k in 0..heads {
        let row: Vec<f64> = (0..n).map(|j| logits[(k, j)]).collect();
        let values = if params.sparsity_axis.sparsifies_tokens() {
            match params.activation {
                ActivationKind::SoftThreshold => simplex_bisection(&row),
                kind => row.iter().map(|&x| activate_scalar(kind, x)).collect(),
            }
        } else {
            row.iter().map(|&x| activate_scalar(ActivationKind::Sigmoid, x)).collect()
        };
        for j in 0..n {
            pi[(k, j)] = values[j];
        }
    }

    let scale = if params.epsilon_fold {
        1.0
    } else {
        d as f64 / (params.coding.epsilon * params.coding.epsilon)
    };
    let mut out = DMatrix::zeros(d, n);
    for r in 0..d {
        let k = r / p;
        let mass: f64 = (0..n).map(|j| pi[(k, j)]).sum::<f64>() + crate::attention::PI_NORM_GUARD;
        let w = |j: usize| gate[k] * s[(r, j)];
        let dots: f64 = (0..n).map(|j| pi[(k, j)] / mass * w(j) * w(j)).sum();
        let attn = scale / (1.0 + scale * dots);
        for j in 0..n {
            out[(r, j)] = -w(j) * pi[(k, j)] * attn;
        }
    }
    let mut y = DMatrix::zeros(d, n);
    for j in 0..n {
        for r in 0..d {
            y[(r, j)] = params.out_bias[r] + (0..d).map(|c| params.out_proj[(r, c)] * out[(c, j)]).sum::<f64>();
        }
    }
    y
}

/// Cross-entropy of the model's logits, evaluated without the tape.
pub fn model_loss(model: &Model, tokens: &Tensor, label: usize) -> f64 {
    let logits = model.logits(tokens).expect("valid input");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - logits[label]
}

/// Central-difference gradient of [`model_loss`] for every parameter entry.
pub fn model_fd_grad(model: &Model, tokens: &Tensor, label: usize, h: f64) -> Vec<Tensor> {
    let mut probe = model.clone();
    let shapes: Vec<(usize, usize)> = model.params().iter().map(Tensor::shape).collect();
    shapes
        .iter()
        .enumerate()
        .map(|(t, &(r, c))| {
            let mut g = Tensor::zeros(r, c);
            for k in 0..r * c {
                let orig = probe.params()[t].data()[k];
                probe.params_mut()[t].data_mut()[k] = orig + h;
                let plus = model_loss(&probe, tokens, label);
                probe.params_mut()[t].data_mut()[k] = orig - h;
                let minus = model_loss(&probe, tokens, label);
                probe.params_mut()[t].data_mut()[k] = orig;
                g.data_mut()[k] = (plus - minus) / (2.0 * h);
            }
            g
        })
        .collect()
}

/// Class with the largest projection energy, computed entry by entry.
pub fn nearest_subspace(tokens: &Tensor, bases: &[DMatrix<f64>]) -> usize {
    let mut best = 0;
    let mut best_energy = f64::NEG_INFINITY;
    for (c, u) in bases.iter().enumerate() {
        let mut e = 0.0;
        for j in 0..tokens.rows() {
            for a in 0..u.ncols() {
                let mut proj = 0.0;
                for i in 0..u.nrows() {
                    proj += u[(i, a)] * tokens.get(j, i);
                }
                e += proj * proj;
            }
        }
        if e > best_energy {
            best = c;
            best_energy = e;
        }
    }
    best
}
