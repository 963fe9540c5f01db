//! DMSA with the membership weighting removed: channel attention whose shared
//! basis `W_S` is gated per token by `G_k = sigmoid(w_k Z)`.
//!
//! Two evaluations of the same quantity are provided:
//!
//! * [`gated_channel_with_gates`] builds, for every token `j`, the gated basis
//!   `U_kj = √G_kj · W_S` and applies `Σ_k U_kj D_k U_kjᵀ z_j`.
//! * [`gated_channel_hadamard`] computes `Σ_k G_k ⊙ (W_S D_k W_Sᵀ Z)`, the
//!   ungated channel attention followed by an elementwise gate.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::coding_rate::{CodingRateConfig, TokenMatrix};
use crate::error::{invalid, Result};
use crate::sparsify::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct GatedChannelParams {
    /// `W_S`, `d × p`, shared by every head.
    pub shared_basis: DMatrix<f64>,
    /// `K × d`; row `k` is `w_k`.
    pub membership_proj: DMatrix<f64>,
    pub coding: CodingRateConfig,
}

impl GatedChannelParams {
    pub fn random<R: Rng>(dim: usize, basis_dim: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        Ok(Self {
            shared_basis: DMatrix::from_fn(dim, basis_dim, |_, _| normal.sample(rng)),
            membership_proj: DMatrix::from_fn(heads, dim, |_, _| normal.sample(rng)),
            coding: CodingRateConfig::default(),
        })
    }

    pub fn gates(&self, z: &TokenMatrix) -> Result<DMatrix<f64>> {
        if self.membership_proj.ncols() != z.dim() || self.shared_basis.nrows() != z.dim() {
            return Err(invalid("gated channel weights do not match the token dim"));
        }
        Ok((&self.membership_proj * z.matrix()).map(sigmoid))
    }
}

/// `diag(D_k)` with `D_k = Diag(f'((W_Sᵀ Z)^⊙2 G_k / ⟨G_k, 1⟩))`.
fn scaling_factors(z: &DMatrix<f64>, w_s: &DMatrix<f64>, gate: &[f64], c: f64) -> Result<Vec<f64>> {
    let mass: f64 = gate.iter().sum();
    if mass <= 0.0 {
        return Err(invalid("gate row has no mass"));
    }
    let proj = w_s.transpose() * z;
    Ok(proj
        .row_iter()
        .map(|r| {
            let x: f64 = r.iter().zip(gate).map(|(v, g)| g / mass * v * v).sum();
            c / (1.0 + c * x)
        })
        .collect())
}

fn check(z: &TokenMatrix, w_s: &DMatrix<f64>, gates: &DMatrix<f64>) -> Result<()> {
    if w_s.nrows() != z.dim() {
        return Err(invalid("shared basis does not match the token dim"));
    }
    if gates.ncols() != z.tokens() {
        return Err(invalid("gates must have one column per token"));
    }
    if gates.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
        return Err(invalid("gates must be finite and nonnegative"));
    }
    Ok(())
}

/// `Σ_k (W_S ⊙ G_k) D_k (W_S ⊙ G_k)ᵀ Z` evaluated token by token with explicit gated bases.
pub fn gated_channel_with_gates(
    z: &TokenMatrix,
    w_s: &DMatrix<f64>,
    gates: &DMatrix<f64>,
    cfg: &CodingRateConfig,
) -> Result<DMatrix<f64>> {
    check(z, w_s, gates)?;
    let c = cfg.coding_scale(z.dim());
    let mut out = DMatrix::zeros(z.dim(), z.tokens());
    for k in 0..gates.nrows() {
        let g: Vec<f64> = gates.row(k).iter().copied().collect();
        let diag = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scaling_factors(
            z.matrix(),
            w_s,
            &g,
            c,
        )?));
        for j in 0..z.tokens() {
            let basis = w_s * g[j].sqrt();
            let op = &basis * &diag * basis.transpose();
            let col = op * z.matrix().column(j);
            let mut dst = out.column_mut(j);
            dst += col;
        }
    }
    Ok(out)
}

/// `Σ_k W_S D_k W_Sᵀ Z` with `D_k` computed from the given gates; no output gating.
pub fn channel_attention(
    z: &TokenMatrix,
    w_s: &DMatrix<f64>,
    gates: &DMatrix<f64>,
    cfg: &CodingRateConfig,
) -> Result<DMatrix<f64>> {
    check(z, w_s, gates)?;
    let c = cfg.coding_scale(z.dim());
    let proj = w_s.transpose() * z.matrix();
    let mut out = DMatrix::zeros(z.dim(), z.tokens());
    for k in 0..gates.nrows() {
        let g: Vec<f64> = gates.row(k).iter().copied().collect();
        let factors = scaling_factors(z.matrix(), w_s, &g, c)?;
        let mut scaled = proj.clone();
        for (i, mut r) in scaled.row_iter_mut().enumerate() {
            r *= factors[i];
        }
        out += w_s * scaled;
    }
    Ok(out)
}

/// `Σ_k G_k ⊙ (W_S D_k W_Sᵀ Z)`: per-head channel attention gated elementwise per token.
pub fn gated_channel_hadamard(
    z: &TokenMatrix,
    w_s: &DMatrix<f64>,
    gates: &DMatrix<f64>,
    cfg: &CodingRateConfig,
) -> Result<DMatrix<f64>> {
    check(z, w_s, gates)?;
    let mut out = DMatrix::zeros(z.dim(), z.tokens());
    for k in 0..gates.nrows() {
        let single = gates.rows(k, 1).into_owned();
        let mut head = channel_attention(z, w_s, &single, cfg)?;
        let broadcast = DMatrix::from_fn(z.dim(), z.tokens(), |_, j| single[(0, j)]);
        head.component_mul_assign(&broadcast);
        out += head;
    }
    Ok(out)
}

/// Gated channel attention with `G_k = sigmoid(w_k Z)`.
pub fn gated_channel_forward(z: &TokenMatrix, params: &GatedChannelParams) -> Result<DMatrix<f64>> {
    let gates = params.gates(z)?;
    gated_channel_with_gates(z, &params.shared_basis, &gates, &params.coding)
}
