//! Soft-threshold simplex projection and membership activations.
//!
//! `ST_j(s) = max(s_j − τ(s), 0)` with `τ(s)` the unique threshold making the
//! outputs sum to one. The threshold is solved exactly by sorting and scanning
//! the cumulative sum.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coding_rate::{Membership, SubspaceBank};
use crate::error::{invalid, Result};

/// Default number of heads kept by the top-k head gate.
pub const DEFAULT_TOPK: usize = 4;

/// Output of a simplex projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeights {
    pub values: Vec<f64>,
    pub threshold: f64,
    pub support: Vec<usize>,
}

impl SparseWeights {
    fn from_threshold(s: &[f64], threshold: f64, allowed: Option<&[usize]>) -> Self {
        let mut values = vec![0.0; s.len()];
        match allowed {
            None => {
                for (v, &x) in values.iter_mut().zip(s) {
                    *v = (x - threshold).max(0.0);
                }
            }
            Some(idx) => {
                for &j in idx {
                    values[j] = (s[j] - threshold).max(0.0);
                }
            }
        }
        let support = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(j, _)| j)
            .collect();
        Self {
            values,
            threshold,
            support,
        }
    }
}

/// Activation applied to membership logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[serde(rename = "st")]
    SoftThreshold,
    Sigmoid,
    Relu,
    Gelu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::SoftThreshold,
        ActivationKind::Sigmoid,
        ActivationKind::Relu,
        ActivationKind::Gelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::SoftThreshold => "st",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
        }
    }

    /// Scalar form for the elementwise kinds. Soft thresholding is not elementwise.
    pub fn apply_scalar(self, x: f64) -> Option<f64> {
        match self {
            ActivationKind::SoftThreshold => None,
            ActivationKind::Sigmoid => Some(sigmoid(x)),
            ActivationKind::Relu => Some(x.max(0.0)),
            ActivationKind::Gelu => Some(gelu(x)),
        }
    }

    pub fn derivative_scalar(self, x: f64) -> Option<f64> {
        match self {
            ActivationKind::SoftThreshold => None,
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                Some(s * (1.0 - s))
            }
            ActivationKind::Relu => Some(if x > 0.0 { 1.0 } else { 0.0 }),
            ActivationKind::Gelu => Some(gelu_derivative(x)),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "st" | "softthreshold" | "soft_threshold" => Ok(ActivationKind::SoftThreshold),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "relu" => Ok(ActivationKind::Relu),
            "gelu" => Ok(ActivationKind::Gelu),
            other => Err(invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// Where the membership is sparsified.
///
/// `Head` gates whole heads of the full space (DMSA), `Token` sparsifies each
/// head's membership across tokens (TPUSA), `Both` does both (TPSUSA).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityAxis {
    Head,
    Token,
    Both,
}

impl SparsityAxis {
    pub fn name(self) -> &'static str {
        match self {
            SparsityAxis::Head => "head",
            SparsityAxis::Token => "token",
            SparsityAxis::Both => "both",
        }
    }

    pub fn gates_heads(self) -> bool {
        matches!(self, SparsityAxis::Head | SparsityAxis::Both)
    }

    pub fn sparsifies_tokens(self) -> bool {
        matches!(self, SparsityAxis::Token | SparsityAxis::Both)
    }
}

impl fmt::Display for SparsityAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SparsityAxis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "head" => Ok(SparsityAxis::Head),
            "token" => Ok(SparsityAxis::Token),
            "both" => Ok(SparsityAxis::Both),
            other => Err(invalid(format!("unknown sparsity axis '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Indices of the `k` largest entries, ties broken by lowest index.
/// Returned in descending order of value.
pub fn topk_indices(s: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    idx.truncate(k);
    idx
}

/// Threshold over the entries at `idx`, which must be sorted in descending order.
fn threshold_sorted(s: &[f64], idx: &[usize]) -> f64 {
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (rank, &j) in idx.iter().enumerate() {
        cumsum += s[j];
        let candidate = (cumsum - 1.0) / (rank + 1) as f64;
        if s[j] > candidate {
            tau = candidate;
        } else {
            break;
        }
    }
    tau
}

fn check_vector(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(invalid("soft threshold needs a non-empty vector"));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(invalid("soft threshold input contains non-finite entries"));
    }
    Ok(())
}

/// Projection of `s` onto the probability simplex.
pub fn soft_threshold(s: &[f64]) -> Result<SparseWeights> {
    check_vector(s)?;
    let order = topk_indices(s, s.len());
    let tau = threshold_sorted(s, &order);
    Ok(SparseWeights::from_threshold(s, tau, None))
}

/// Simplex projection restricted to the `k` largest entries of `s`; the rest are zero.
pub fn soft_threshold_topk(s: &[f64], k: usize) -> Result<SparseWeights> {
    check_vector(s)?;
    if k == 0 || k > s.len() {
        return Err(invalid(format!("top-k must be in 1..={}, got {k}", s.len())));
    }
    let top = topk_indices(s, k);
    let tau = threshold_sorted(s, &top);
    Ok(SparseWeights::from_threshold(s, tau, Some(&top)))
}

/// Full projection followed by masking to the `k` largest entries, without
/// renormalizing. The kept values sum to at most one.
pub fn soft_threshold_masked(s: &[f64], k: usize) -> Result<SparseWeights> {
    let full = soft_threshold(s)?;
    if k == 0 || k > s.len() {
        return Err(invalid(format!("top-k must be in 1..={}, got {k}", s.len())));
    }
    let top = topk_indices(s, k);
    Ok(SparseWeights::from_threshold(s, full.threshold, Some(&top)))
}

/// Vector-Jacobian product of a simplex projection at its output `values`.
///
/// On the active set `A` the Jacobian is `I − 11ᵀ/|A|`; it is zero elsewhere.
pub fn soft_threshold_backward(values: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let active: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(j, _)| j)
        .collect();
    let mut grad = vec![0.0; values.len()];
    if active.is_empty() {
        return grad;
    }
    let mean = active.iter().map(|&j| grad_out[j]).sum::<f64>() / active.len() as f64;
    for &j in &active {
        grad[j] = grad_out[j] - mean;
    }
    grad
}

/// Applies an activation to a whole vector: soft thresholding projects it,
/// the other kinds act elementwise.
pub fn activate(values: &[f64], kind: ActivationKind) -> Result<Vec<f64>> {
    match kind {
        ActivationKind::SoftThreshold => Ok(soft_threshold(values)?.values),
        other => Ok(values
            .iter()
            .map(|&x| other.apply_scalar(x).expect("elementwise activation"))
            .collect()),
    }
}

/// Activates raw `K × n` membership logits. Soft thresholding acts per token
/// column across heads.
pub fn activate_membership(raw: &DMatrix<f64>, kind: ActivationKind) -> Result<Membership> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(invalid("membership logits contain non-finite entries"));
    }
    let mut out = raw.clone();
    match kind {
        ActivationKind::SoftThreshold => {
            for mut col in out.column_iter_mut() {
                let projected = soft_threshold(col.as_slice())?;
                col.copy_from_slice(&projected.values);
            }
        }
        other => out.apply(|v| *v = other.apply_scalar(*v).expect("elementwise activation")),
    }
    Membership::new(out)
}

/// Full space and membership after sparsification along `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSelection {
    pub subspaces: SubspaceBank,
    pub membership: Membership,
    /// Per-head gate, present when heads were gated.
    pub head_gate: Option<Vec<f64>>,
}

/// `U_k^S = S ⊙ σ(Π)` along the chosen axis.
///
/// * head: `g = ST_topk(mean_tokens(π_k))` scales each basis of `S`.
/// * token: each `π_k` is projected onto the simplex across tokens; `S` is kept.
/// * both: both of the above.
pub fn sparse_subspace(
    full_space: &SubspaceBank,
    pi: &Membership,
    axis: SparsityAxis,
    topk: usize,
) -> Result<SparseSelection> {
    if pi.heads() != full_space.heads() {
        return Err(invalid(format!(
            "membership has {} heads, full space has {}",
            pi.heads(),
            full_space.heads()
        )));
    }
    let mut subspaces = full_space.clone();
    let mut head_gate = None;
    if axis.gates_heads() {
        let mean: Vec<f64> = pi
            .matrix()
            .row_iter()
            .map(|r| r.sum() / pi.tokens() as f64)
            .collect();
        let gate = soft_threshold_topk(&mean, topk)?.values;
        subspaces = full_space.scaled(&gate)?;
        head_gate = Some(gate);
    }
    let membership = if axis.sparsifies_tokens() {
        let mut m = pi.matrix().clone();
        for mut row in m.row_iter_mut() {
            let v: Vec<f64> = row.iter().copied().collect();
            let projected = soft_threshold(&v)?.values;
            for (dst, src) in row.iter_mut().zip(projected) {
                *dst = src;
            }
        }
        Membership::new(m)?
    } else {
        pi.clone()
    };
    Ok(SparseSelection {
        subspaces,
        membership,
        head_gate,
    })
}
