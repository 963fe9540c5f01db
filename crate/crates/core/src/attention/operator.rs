use nalgebra::DMatrix;

use crate::coding_rate::{grad_rate_variational_decoupled, CodingRateConfig, Membership, SubspaceBank, TokenMatrix};
use crate::error::{invalid, Result};

/// `DMSA(Z | π_k, U_k^S) = −(1/n) Σ_k U_k^S D_k (U_k^S)ᵀ Z Diag(π_k)`.
///
/// Exactly the negation of
/// [`grad_rate_variational_decoupled`](crate::coding_rate::grad_rate_variational_decoupled).
pub fn dmsa_operator(
    z: &TokenMatrix,
    pi: &Membership,
    u_s: &SubspaceBank,
    cfg: &CodingRateConfig,
) -> Result<DMatrix<f64>> {
    Ok(-grad_rate_variational_decoupled(z, pi, u_s, cfg)?)
}

/// One unrolled descent step on the compression term: `Z + step · DMSA(Z)`.
pub fn token_update(
    z: &TokenMatrix,
    pi: &Membership,
    u_s: &SubspaceBank,
    cfg: &CodingRateConfig,
    step: f64,
) -> Result<TokenMatrix> {
    if !(step.is_finite() && step >= 0.0) {
        return Err(invalid(format!("step must be nonnegative, got {step}")));
    }
    let delta = dmsa_operator(z, pi, u_s, cfg)?;
    TokenMatrix::new(z.matrix() + delta * step)
}
