//! Lossy coding-rate estimates and their variational upper bounds.
//!
//! All rates are in nats and computed in `f64`. Token features are stored as a
//! `d × n` matrix whose columns are tokens; memberships are `K × n` with one
//! row per group (head).
//!
//! | Function | Quantity |
//! |----------|----------|
//! | [`rate_total`] | `½ log det(I + α Z Zᵀ)`, `α = d / (n ε²)` |
//! | [`rate_segmented`] | `½ Σ_k log det(I + γ_k Z Diag(π_k) Zᵀ)`, `γ_k = d / (n_k ε²)` |
//! | [`rate_subspace_bound`] | `½ Σ_k log det(I + β (U_kᵀZ)ᵀ(U_kᵀZ))` |
//! | [`rate_variational_coupled`] | variational bound with `Π` derived from `U` by a softmax |
//! | [`rate_variational_decoupled`] | the same bound with `Π` and `U` supplied independently |
//! | [`grad_rate_variational_decoupled`] | gradient of the decoupled bound in `Z`, `Π` held fixed |
//!
//! The variational bound is
//!
//! ```text
//! ½ Σ_k (n_k/n) Σ_i f( (1/n_k) (U_kᵀ Z Diag(π_k) Zᵀ U_k)_ii ),   f(x) = log(1 + (d/ε²) x)
//! ```
//!
//! Groups whose mass `n_k = ⟨π_k, 1⟩` is at most [`ZERO_MASS`] contribute
//! neither rate nor gradient.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::sparsify::{activate_membership, ActivationKind};

/// Group mass at or below which a group is skipped.
pub const ZERO_MASS: f64 = 1e-12;

/// Arguments of `f` below this value are reported as a numerical fault.
const NEGATIVE_ARGUMENT_TOLERANCE: f64 = -1e-12;

/// `d × n` token features; columns are tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    data: DMatrix<f64>,
}

impl TokenMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(invalid(format!(
                "token matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("token matrix contains non-finite entries"));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize, tokens: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(dim, tokens))
    }

    /// Builds from `(token, channel)` row-major data of `tokens × dim` values.
    pub fn from_token_rows(rows: &[f64], tokens: usize, dim: usize) -> Result<Self> {
        if rows.len() != tokens * dim {
            return Err(invalid(format!(
                "expected {} values for {tokens} tokens of dim {dim}, got {}",
                tokens * dim,
                rows.len()
            )));
        }
        // row-major (token, channel) is column-major d × n
        Self::new(DMatrix::from_column_slice(dim, tokens, rows))
    }

    /// Flattens to `(token, channel)` row-major order.
    pub fn to_token_rows(&self) -> Vec<f64> {
        self.data.as_slice().to_vec()
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn tokens(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }
}

/// Quantization precision and subspace coefficient.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodingRateConfig {
    pub epsilon: f64,
    pub beta: f64,
}

impl Default for CodingRateConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            beta: 1.0,
        }
    }
}

impl CodingRateConfig {
    pub fn new(epsilon: f64, beta: f64) -> Result<Self> {
        let cfg = Self { epsilon, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(invalid(format!("beta must be positive, got {}", self.beta)));
        }
        let scale = 1.0 / (self.epsilon * self.epsilon);
        if !scale.is_finite() {
            return Err(invalid("epsilon too small: d/ε² overflows"));
        }
        Ok(())
    }

    /// `α = d / (n ε²)`.
    pub fn alpha(&self, dim: usize, tokens: usize) -> f64 {
        dim as f64 / (tokens as f64 * self.epsilon * self.epsilon)
    }

    /// `γ_k = d / (n_k ε²)`.
    pub fn gamma(&self, dim: usize, group_mass: f64) -> f64 {
        dim as f64 / (group_mass * self.epsilon * self.epsilon)
    }

    /// `d / ε²`, the slope of `f` at zero.
    pub fn coding_scale(&self, dim: usize) -> f64 {
        dim as f64 / (self.epsilon * self.epsilon)
    }
}

/// `K × n` token-to-group assignment weights; row `k` is `π_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    data: DMatrix<f64>,
}

impl Membership {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(invalid("membership must be non-empty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("membership contains non-finite entries"));
        }
        Ok(Self { data })
    }

    pub fn uniform(heads: usize, tokens: usize, value: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(heads, tokens, value))
    }

    pub fn heads(&self) -> usize {
        self.data.nrows()
    }

    pub fn tokens(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// `n_k = ⟨π_k, 1⟩` for each group.
    pub fn group_mass(&self) -> DVector<f64> {
        DVector::from_iterator(self.heads(), self.data.row_iter().map(|r| r.sum()))
    }

    pub fn is_column_stochastic(&self, tol: f64) -> bool {
        self.data
            .column_iter()
            .all(|c| (c.sum() - 1.0).abs() <= tol && c.iter().all(|&v| v >= -tol))
    }

    fn require_nonnegative(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|&&v| v < 0.0) {
            return Err(invalid(format!("membership entries must be nonnegative, found {v}")));
        }
        Ok(())
    }
}

/// `K` bases of shape `d × p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBank {
    bases: Vec<DMatrix<f64>>,
    orthonormal: bool,
}

/// Column orthonormality tolerance for [`SubspaceBank::orthonormal`].
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-8;

impl SubspaceBank {
    /// Bank without an orthonormality guarantee.
    pub fn new(bases: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = bases.first().ok_or_else(|| invalid("subspace bank is empty"))?;
        let dim = first.nrows();
        if dim == 0 {
            return Err(invalid("subspace bases must have at least one row"));
        }
        for (k, b) in bases.iter().enumerate() {
            if b.nrows() != dim {
                return Err(invalid(format!(
                    "basis {k} has {} rows, expected {dim}",
                    b.nrows()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("basis {k} contains non-finite entries")));
            }
        }
        Ok(Self {
            bases,
            orthonormal: false,
        })
    }

    /// Bank whose bases are checked to satisfy `U_kᵀU_k = I` within [`ORTHONORMAL_TOLERANCE`].
    pub fn orthonormal(bases: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut bank = Self::new(bases)?;
        for (k, b) in bank.bases.iter().enumerate() {
            let gram = b.transpose() * b;
            let err = (&gram - DMatrix::identity(gram.nrows(), gram.ncols())).amax();
            if err > ORTHONORMAL_TOLERANCE {
                return Err(invalid(format!(
                    "basis {k} is not orthonormal (max deviation {err:e})"
                )));
            }
        }
        bank.orthonormal = true;
        Ok(bank)
    }

    pub fn heads(&self) -> usize {
        self.bases.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.bases[0].nrows()
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }

    pub fn bases(&self) -> &[DMatrix<f64>] {
        &self.bases
    }

    pub fn into_bases(self) -> Vec<DMatrix<f64>> {
        self.bases
    }

    /// Scales each basis by its gate value. The result carries no orthonormal flag.
    pub fn scaled(&self, gate: &[f64]) -> Result<Self> {
        if gate.len() != self.heads() {
            return Err(invalid(format!(
                "gate has {} entries for {} heads",
                gate.len(),
                self.heads()
            )));
        }
        Self::new(self.bases.iter().zip(gate).map(|(b, &g)| b * g).collect())
    }
}

/// Whole-set rate, segmented rate, and their difference.
#[derive(Debug, Clone, PartialEq)]
pub struct RateBreakdown {
    pub total_rate: f64,
    pub segmented_rate: f64,
    pub per_subspace: Vec<f64>,
    pub reduction: f64,
}

/// `log det(M)` for a symmetric positive-semidefinite matrix.
///
/// Uses a Cholesky factorization; falls back to a symmetric eigendecomposition
/// when the matrix is singular or numerically indefinite.
pub fn logdet_psd(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(invalid(format!("expected a non-empty square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix contains non-finite entries"));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(invalid("matrix is not symmetric"));
    }
    if let Some(chol) = m.clone().cholesky() {
        let l = chol.l_dirty();
        return Ok(2.0 * (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>());
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -1e-8 {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0).ln()).sum())
}

/// `½ log det(I + c Z Zᵀ)`, evaluated on whichever Gram form is smaller.
pub fn half_logdet_gram(z: &DMatrix<f64>, c: f64) -> Result<f64> {
    let (rows, cols) = z.shape();
    let mut gram = if rows <= cols {
        z * z.transpose()
    } else {
        z.transpose() * z
    };
    gram *= c;
    for i in 0..gram.nrows() {
        gram[(i, i)] += 1.0;
    }
    Ok(0.5 * logdet_psd(&gram)?)
}

/// `R(Z) = ½ log det(I + α Z Zᵀ)`.
pub fn rate_total(z: &TokenMatrix, cfg: &CodingRateConfig) -> Result<f64> {
    cfg.validate()?;
    half_logdet_gram(z.matrix(), cfg.alpha(z.dim(), z.tokens()))
}

/// `R^c(Z | Π) = ½ Σ_k log det(I + γ_k Z Diag(π_k) Zᵀ)`.
pub fn rate_segmented(z: &TokenMatrix, pi: &Membership, cfg: &CodingRateConfig) -> Result<f64> {
    cfg.validate()?;
    check_membership(z, pi)?;
    pi.require_nonnegative()?;
    let mut total = 0.0;
    for (k, row) in pi.matrix().row_iter().enumerate() {
        let mass = row.sum();
        if mass <= ZERO_MASS {
            log::debug!("segmented rate: group {k} has zero mass, skipped");
            continue;
        }
        let mut weighted = z.matrix().clone();
        for (j, mut col) in weighted.column_iter_mut().enumerate() {
            col *= row[j].sqrt();
        }
        total += half_logdet_gram(&weighted, cfg.gamma(z.dim(), mass))?;
    }
    Ok(total)
}

/// `R_{c,f}(Z | U) = ½ Σ_k log det(I + β (U_kᵀZ)ᵀ(U_kᵀZ))`.
pub fn rate_subspace_bound(z: &TokenMatrix, u: &SubspaceBank, cfg: &CodingRateConfig) -> Result<f64> {
    cfg.validate()?;
    check_bank(z, u)?;
    u.bases()
        .iter()
        .map(|b| half_logdet_gram(&(b.transpose() * z.matrix()), cfg.beta))
        .sum()
}

/// Coupled membership: column `i` is `softmax_k(‖U_kᵀ z_i‖² / (2η))`.
pub fn membership_from_subspaces(z: &TokenMatrix, u: &SubspaceBank, eta: f64) -> Result<Membership> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(invalid(format!("eta must be positive, got {eta}")));
    }
    check_bank(z, u)?;
    let heads = u.heads();
    let mut energy = DMatrix::zeros(heads, z.tokens());
    for (k, b) in u.bases().iter().enumerate() {
        let proj = b.transpose() * z.matrix();
        for (j, col) in proj.column_iter().enumerate() {
            energy[(k, j)] = col.norm_squared() / (2.0 * eta);
        }
    }
    for mut col in energy.column_iter_mut() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    Membership::new(energy)
}

/// Variational bound with the membership derived from `U` itself.
///
/// Requires an orthonormal bank.
pub fn rate_variational_coupled(
    z: &TokenMatrix,
    u: &SubspaceBank,
    eta: f64,
    cfg: &CodingRateConfig,
) -> Result<f64> {
    if !u.is_orthonormal() {
        return Err(invalid("coupled variational rate requires an orthonormal subspace bank"));
    }
    let pi = membership_from_subspaces(z, u, eta)?;
    rate_variational_decoupled(z, &pi, u, cfg)
}

/// Per-group terms `½ (n_k/n) Σ_i f((1/n_k)(U_kᵀ Z Diag(π_k) Zᵀ U_k)_ii)`.
pub fn variational_terms(
    z: &TokenMatrix,
    pi: &Membership,
    u_s: &SubspaceBank,
    cfg: &CodingRateConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_membership(z, pi)?;
    check_bank(z, u_s)?;
    if pi.heads() != u_s.heads() {
        return Err(invalid(format!(
            "membership has {} groups but the bank has {} bases",
            pi.heads(),
            u_s.heads()
        )));
    }
    let n = z.tokens() as f64;
    let c = cfg.coding_scale(z.dim());
    let mut terms = Vec::with_capacity(pi.heads());
    for (k, (basis, row)) in u_s.bases().iter().zip(pi.matrix().row_iter()).enumerate() {
        let mass = row.sum();
        if mass <= ZERO_MASS {
            terms.push(0.0);
            continue;
        }
        let args = second_moments(basis, z.matrix(), row.iter().copied(), mass, k)?;
        let sum: f64 = args.iter().map(|&x| (c * x).ln_1p()).sum();
        terms.push(0.5 * mass / n * sum);
    }
    Ok(terms)
}

/// `R_cf^var(Z | (π_k, U_k^S))` with membership and subspaces supplied independently.
///
/// `Z π_k Zᵀ` is read as `Z Diag(π_k) Zᵀ`.
pub fn rate_variational_decoupled(
    z: &TokenMatrix,
    pi: &Membership,
    u_s: &SubspaceBank,
    cfg: &CodingRateConfig,
) -> Result<f64> {
    Ok(variational_terms(z, pi, u_s, cfg)?.iter().sum())
}

/// `R(Z) − R_cf^var(Z | (π_k, U_k^S))`.
pub fn rate_reduction(
    z: &TokenMatrix,
    pi: &Membership,
    u_s: &SubspaceBank,
    cfg: &CodingRateConfig,
) -> Result<RateBreakdown> {
    let total_rate = rate_total(z, cfg)?;
    let per_subspace = variational_terms(z, pi, u_s, cfg)?;
    let segmented_rate: f64 = per_subspace.iter().sum();
    Ok(RateBreakdown {
        total_rate,
        segmented_rate,
        per_subspace,
        reduction: total_rate - segmented_rate,
    })
}

/// Gradient of [`rate_variational_decoupled`] with respect to `Z`, `Π` held fixed:
///
/// ```text
/// (1/n) Σ_k U_k D_k U_kᵀ Z Diag(π_k),   D_k = Diag(f'((U_kᵀZ)^⊙2 π_k / n_k))
/// ```
pub fn grad_rate_variational_decoupled(
    z: &TokenMatrix,
    pi: &Membership,
    u_s: &SubspaceBank,
    cfg: &CodingRateConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    check_membership(z, pi)?;
    check_bank(z, u_s)?;
    if pi.heads() != u_s.heads() {
        return Err(invalid(format!(
            "membership has {} groups but the bank has {} bases",
            pi.heads(),
            u_s.heads()
        )));
    }
    let n = z.tokens() as f64;
    let c = cfg.coding_scale(z.dim());
    let mut grad = DMatrix::zeros(z.dim(), z.tokens());
    for (k, (basis, row)) in u_s.bases().iter().zip(pi.matrix().row_iter()).enumerate() {
        let mass = row.sum();
        if mass <= ZERO_MASS {
            log::debug!("variational gradient: group {k} has zero mass, skipped");
            continue;
        }
        let args = second_moments(basis, z.matrix(), row.iter().copied(), mass, k)?;
        let mut proj = basis.transpose() * z.matrix();
        for (i, mut r) in proj.row_iter_mut().enumerate() {
            r *= c / (1.0 + c * args[i]);
        }
        for (j, mut col) in proj.column_iter_mut().enumerate() {
            col *= row[j];
        }
        grad += basis * proj;
    }
    grad /= n;
    Ok(grad)
}

/// Gradient with the membership produced from a projection: `Π = σ(W Z)`.
///
/// `w` is `K × d`. The membership is treated as constant, so no gradient flows
/// back through `W Z`.
pub fn grad_rate_variational_from_projection(
    z: &TokenMatrix,
    w: &DMatrix<f64>,
    u_s: &SubspaceBank,
    cfg: &CodingRateConfig,
    activation: ActivationKind,
) -> Result<DMatrix<f64>> {
    if w.ncols() != z.dim() {
        return Err(invalid(format!(
            "membership projection has {} columns, tokens have dim {}",
            w.ncols(),
            z.dim()
        )));
    }
    let pi = activate_membership(&(w * z.matrix()), activation)?;
    grad_rate_variational_decoupled(z, &pi, u_s, cfg)
}

/// `(1/n_k) Σ_j π_kj ((U_kᵀ z_j)_i)²` for each basis column `i`.
fn second_moments(
    basis: &DMatrix<f64>,
    z: &DMatrix<f64>,
    weights: impl Iterator<Item = f64>,
    mass: f64,
    group: usize,
) -> Result<Vec<f64>> {
    let proj = basis.transpose() * z;
    let mut acc = vec![0.0; proj.nrows()];
    for (col, w) in proj.column_iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(col.iter()) {
            *a += w * v * v;
        }
    }
    for a in acc.iter_mut() {
        *a /= mass;
        if *a < NEGATIVE_ARGUMENT_TOLERANCE {
            return Err(Error::NumericalFault(format!(
                "negative second moment {a:e} in group {group}"
            )));
        }
        *a = a.max(0.0);
    }
    Ok(acc)
}

fn check_membership(z: &TokenMatrix, pi: &Membership) -> Result<()> {
    if pi.tokens() != z.tokens() {
        return Err(invalid(format!(
            "membership covers {} tokens, features have {}",
            pi.tokens(),
            z.tokens()
        )));
    }
    Ok(())
}

fn check_bank(z: &TokenMatrix, u: &SubspaceBank) -> Result<()> {
    if u.ambient_dim() != z.dim() {
        return Err(invalid(format!(
            "subspace bases live in dim {}, features have dim {}",
            u.ambient_dim(),
            z.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
        }};
    }

    fn cfg() -> CodingRateConfig {
        CodingRateConfig::default()
    }

    #[test]
    fn logdet_trivial_cases() {
        assert_close!(logdet_psd(&DMatrix::identity(3, 3)).unwrap(), 0.0, 1e-15);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
        assert_close!(logdet_psd(&m).unwrap(), 2.0 * 2f64.ln(), 1e-15);
    }

    #[test]
    fn logdet_rejects_bad_input() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 0)] = f64::NAN;
        assert!(matches!(logdet_psd(&m), Err(Error::InvalidInput(_))));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(logdet_psd(&neg), Err(Error::NotPsd { .. })));
        let singular = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(logdet_psd(&singular).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn total_rate_trivial_cases() {
        assert_eq!(rate_total(&TokenMatrix::zeros(4, 4).unwrap(), &cfg()).unwrap(), 0.0);
        let eye = TokenMatrix::new(DMatrix::identity(2, 2)).unwrap();
        assert_close!(rate_total(&eye, &cfg()).unwrap(), 2f64.ln(), 1e-14);
    }

    #[test]
    fn single_group_segmented_equals_total() {
        let z = TokenMatrix::new(DMatrix::from_fn(3, 5, |i, j| (i as f64 - j as f64) * 0.3 + 0.1)).unwrap();
        let pi = Membership::uniform(1, 5, 1.0).unwrap();
        assert_eq!(
            rate_segmented(&z, &pi, &cfg()).unwrap(),
            rate_total(&z, &cfg()).unwrap()
        );
    }

    #[test]
    fn zero_features_have_zero_rates() {
        let z = TokenMatrix::zeros(4, 6).unwrap();
        let pi = Membership::uniform(2, 6, 0.5).unwrap();
        let bank = SubspaceBank::new(vec![DMatrix::identity(4, 2), DMatrix::identity(4, 2)]).unwrap();
        assert_eq!(rate_segmented(&z, &pi, &cfg()).unwrap(), 0.0);
        assert_eq!(rate_subspace_bound(&z, &bank, &cfg()).unwrap(), 0.0);
        assert_eq!(rate_variational_decoupled(&z, &pi, &bank, &cfg()).unwrap(), 0.0);
        let g = grad_rate_variational_decoupled(&z, &pi, &bank, &cfg()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_membership_skips_all_groups() {
        let z = TokenMatrix::new(DMatrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64)).unwrap();
        let pi = Membership::uniform(2, 3, 0.0).unwrap();
        let bank = SubspaceBank::new(vec![DMatrix::identity(4, 2); 2]).unwrap();
        assert_eq!(rate_variational_decoupled(&z, &pi, &bank, &cfg()).unwrap(), 0.0);
        let b = rate_reduction(&z, &pi, &bank, &cfg()).unwrap();
        assert_eq!(b.reduction, rate_total(&z, &cfg()).unwrap());
    }

    #[test]
    fn identical_subspaces_give_uniform_membership() {
        let z = TokenMatrix::new(DMatrix::from_fn(4, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0)).unwrap();
        let bank = SubspaceBank::orthonormal(vec![DMatrix::identity(4, 2); 3]).unwrap();
        let pi = membership_from_subspaces(&z, &bank, 0.7).unwrap();
        assert!(pi.matrix().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let single = SubspaceBank::orthonormal(vec![DMatrix::identity(4, 2)]).unwrap();
        let pi = membership_from_subspaces(&z, &single, 0.7).unwrap();
        assert!(pi.matrix().iter().all(|&v| v == 1.0));
        assert!(membership_from_subspaces(&z, &bank, 0.0).is_err());
    }

    #[test]
    fn coupled_requires_orthonormal_flag() {
        let z = TokenMatrix::zeros(2, 2).unwrap();
        let bank = SubspaceBank::new(vec![DMatrix::identity(2, 1)]).unwrap();
        assert!(rate_variational_coupled(&z, &bank, 1.0, &cfg()).is_err());
    }

    #[test]
    fn dimension_mismatch_is_invalid() {
        let z = TokenMatrix::zeros(3, 4).unwrap();
        let pi = Membership::uniform(1, 5, 1.0).unwrap();
        assert!(matches!(rate_segmented(&z, &pi, &cfg()), Err(Error::InvalidInput(_))));
        let bank = SubspaceBank::new(vec![DMatrix::identity(2, 2)]).unwrap();
        assert!(matches!(rate_subspace_bound(&z, &bank, &cfg()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_validation() {
        assert!(CodingRateConfig::new(0.0, 1.0).is_err());
        assert!(CodingRateConfig::new(1.0, -1.0).is_err());
        assert!(CodingRateConfig::new(0.5, 2.0).is_ok());
    }

    #[test]
    fn token_row_layout_round_trip() {
        let rows: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let z = TokenMatrix::from_token_rows(&rows, 4, 3).unwrap();
        // token 1, channel 2
        assert_eq!(z.matrix()[(2, 1)], 5.0);
        assert_eq!(z.to_token_rows(), rows);
    }
}
