use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::rope::{rope_precompute, RopeTable};
use crate::coding_rate::{CodingRateConfig, Membership, SubspaceBank, TokenMatrix};
use crate::error::{invalid, Error, Result};
use crate::memory::ActivationMeter;
use crate::sparsify::{sigmoid, soft_threshold, soft_threshold_topk, ActivationKind, SparsityAxis, DEFAULT_TOPK};

/// Denominator guard when normalizing membership over tokens.
pub const PI_NORM_GUARD: f64 = 1e-8;

/// Rotary table length used by [`DmsaLayerParams::random`].
const DEFAULT_ROPE_LEN: usize = 4096;

/// Weights and switches of one DMSA layer.
///
/// `value_proj` produces the full-space features `S` (head `k` owns rows
/// `k·p .. (k+1)·p`), `membership_proj` produces the membership logits, and
/// `out_proj` maps the merged heads back to the token space.
#[derive(Debug, Clone, PartialEq)]
pub struct DmsaLayerParams {
    pub value_proj: DMatrix<f64>,
    pub membership_proj: DMatrix<f64>,
    pub out_proj: DMatrix<f64>,
    pub out_bias: DVector<f64>,
    pub rope: Option<RopeTable>,
    pub heads: usize,
    pub sparsity_axis: SparsityAxis,
    pub topk: usize,
    pub activation: ActivationKind,
    /// Fold `d/ε²` to one inside `∇f`, giving `attn = 1/(1 + dots)`.
    pub epsilon_fold: bool,
    pub coding: CodingRateConfig,
}

impl DmsaLayerParams {
    /// Gaussian weights with the given standard deviation, zero bias, RoPE enabled.
    pub fn random<R: Rng>(dim: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| normal.sample(rng));
        let params = Self {
            value_proj: draw(dim, dim),
            membership_proj: draw(heads, dim),
            out_proj: draw(dim, dim),
            out_bias: DVector::zeros(dim),
            rope: Some(rope_precompute(DEFAULT_ROPE_LEN, dim)?),
            heads,
            sparsity_axis: SparsityAxis::Head,
            topk: DEFAULT_TOPK.min(heads),
            activation: ActivationKind::SoftThreshold,
            epsilon_fold: true,
            coding: CodingRateConfig::default(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.value_proj.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(invalid(format!("dim {d} is not divisible by {} heads", self.heads)));
        }
        if self.value_proj.shape() != (d, d) || self.out_proj.shape() != (d, d) {
            return Err(invalid("value and output projections must be d × d"));
        }
        if self.membership_proj.shape() != (self.heads, d) {
            return Err(invalid(format!(
                "membership projection must be {} × {d}, got {:?}",
                self.heads,
                self.membership_proj.shape()
            )));
        }
        if self.out_bias.len() != d {
            return Err(invalid("output bias must have length d"));
        }
        if self.sparsity_axis.gates_heads()
            && self.activation == ActivationKind::SoftThreshold
            && (self.topk == 0 || self.topk > self.heads)
        {
            return Err(invalid(format!("topk must be in 1..={}, got {}", self.heads, self.topk)));
        }
        if let Some(t) = &self.rope {
            if t.dim() != d {
                return Err(invalid("rotary table dim does not match layer dim"));
            }
        }
        let finite = self
            .value_proj
            .iter()
            .chain(self.membership_proj.iter())
            .chain(self.out_proj.iter())
            .chain(self.out_bias.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("layer weights contain non-finite entries"));
        }
        self.coding.validate()
    }

    /// `U_k^S = g_k · W_k^ᵀ` where `W_k` are head `k`'s rows of the value projection.
    pub fn sparse_subspaces(&self, gate: &[f64]) -> Result<SubspaceBank> {
        if gate.len() != self.heads {
            return Err(invalid("one gate value per head is required"));
        }
        let p = self.head_dim();
        SubspaceBank::new(
            (0..self.heads)
                .map(|k| self.value_proj.rows(k * p, p).transpose() * gate[k])
                .collect(),
        )
    }
}

/// Values that replace computed quantities in [`dmsa_layer_forward_traced`].
#[derive(Debug, Clone, Copy, Default)]
pub struct DmsaOverrides<'a> {
    pub membership: Option<&'a Membership>,
    pub head_gate: Option<&'a [f64]>,
}

/// Output of a DMSA layer together with the quantities it used.
#[derive(Debug, Clone)]
pub struct DmsaForward {
    pub output: TokenMatrix,
    /// Activated membership `Π`, `K × n`.
    pub membership: Membership,
    /// Per-head gate applied to the full space (all ones when heads are not gated).
    pub head_gate: Vec<f64>,
    /// Raw membership logits, `K × n`.
    pub logits: DMatrix<f64>,
}

pub fn dmsa_layer_forward(tokens: &TokenMatrix, params: &DmsaLayerParams) -> Result<TokenMatrix> {
    let mut meter = ActivationMeter::new();
    Ok(dmsa_layer_forward_traced(tokens, params, DmsaOverrides::default(), &mut meter)?.output)
}

/// DMSA layer in the `d × n` convention:
///
/// ```text
/// S     = W_v Z                               full-space features, K heads of p rows
/// L     = W_π RoPE(Z)                         membership logits, K × n
/// g     = σ_gate(mean_tokens(L))              head gate (top-k soft threshold by default)
/// w_k   = g_k S_k
/// Π     = sigmoid(L)
/// dots  = Σ_j Π_kj / (Σ_j Π_kj + 1e-8) · w_k[:, j]^⊙2
/// out_k = −w_k ⊙ Π_k ⊙ 1/(1 + dots)
/// Y     = W_o out + b_o
/// ```
pub fn dmsa_layer_forward_traced(
    tokens: &TokenMatrix,
    params: &DmsaLayerParams,
    overrides: DmsaOverrides<'_>,
    meter: &mut ActivationMeter,
) -> Result<DmsaForward> {
    params.validate()?;
    let (d, n, heads, p) = (params.dim(), tokens.tokens(), params.heads, params.head_dim());
    if tokens.dim() != d {
        return Err(invalid(format!("tokens have dim {}, layer expects {d}", tokens.dim())));
    }
    let z = tokens.matrix();
    meter.alloc(d * n);

    let full = &params.value_proj * z;
    meter.alloc(d * n);

    let logits = match &params.rope {
        Some(table) => {
            let rotated = super::rope::rope_apply(tokens, table)?;
            meter.alloc(d * n);
            &params.membership_proj * rotated.matrix()
        }
        None => &params.membership_proj * z,
    };
    meter.alloc(heads * n);

    let head_gate = match overrides.head_gate {
        Some(g) => {
            if g.len() != heads {
                return Err(invalid("head gate override needs one value per head"));
            }
            g.to_vec()
        }
        None => compute_head_gate(&logits, params)?,
    };
    meter.alloc(2 * heads);

    let mut w = full;
    for k in 0..heads {
        w.rows_mut(k * p, p).scale_mut(head_gate[k]);
    }
    meter.alloc(d * n);

    let membership = match overrides.membership {
        Some(m) => {
            if m.heads() != heads || m.tokens() != n {
                return Err(invalid("membership override has the wrong shape"));
            }
            m.clone()
        }
        None => compute_membership(&logits, params)?,
    };
    meter.alloc(heads * n);

    let scale = if params.epsilon_fold {
        1.0
    } else {
        params.coding.coding_scale(d)
    };
    let out = second_moment_scaling(&w, membership.matrix(), p, scale, meter);
    meter.alloc(d * n);
    let y = &params.out_proj * out + &params.out_bias * nalgebra::RowDVector::from_element(n, 1.0);
    meter.alloc(d * n);

    if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalFault(format!(
            "DMSA layer produced a non-finite output at channel {}, token {} (gate {:?})",
            pos % d,
            pos / d,
            head_gate
        )));
    }
    Ok(DmsaForward {
        output: TokenMatrix::new(y)?,
        membership,
        head_gate,
        logits,
    })
}

/// `out_k = −w_k ⊙ Π_k ⊙ s/(1 + s·dots_k)` with `dots_k` the Π-weighted second moment of `w_k`.
fn second_moment_scaling(
    w: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    head_dim: usize,
    scale: f64,
    meter: &mut ActivationMeter,
) -> DMatrix<f64> {
    let (d, n) = w.shape();
    let heads = pi.nrows();
    meter.alloc(heads * n); // normalized membership
    meter.alloc(d * n); // w^⊙2
    meter.alloc(2 * d); // dots, attn
    let mut out = DMatrix::zeros(d, n);
    for k in 0..heads {
        let row = pi.row(k);
        let denom = row.sum() + PI_NORM_GUARD;
        for i in k * head_dim..(k + 1) * head_dim {
            let dots: f64 = (0..n).map(|j| row[j] / denom * w[(i, j)] * w[(i, j)]).sum();
            let attn = scale / (1.0 + scale * dots);
            for j in 0..n {
                out[(i, j)] = -w[(i, j)] * row[j] * attn;
            }
        }
    }
    meter.alloc(d * n); // w ⊙ Π
    out
}

fn compute_head_gate(logits: &DMatrix<f64>, params: &DmsaLayerParams) -> Result<Vec<f64>> {
    let heads = logits.nrows();
    if !params.sparsity_axis.gates_heads() {
        return Ok(vec![1.0; heads]);
    }
    let n = logits.ncols() as f64;
    let mean: Vec<f64> = logits.row_iter().map(|r| r.sum() / n).collect();
    match params.activation {
        ActivationKind::SoftThreshold => Ok(soft_threshold_topk(&mean, params.topk)?.values),
        kind => Ok(mean
            .iter()
            .map(|&x| kind.apply_scalar(x).expect("elementwise activation"))
            .collect()),
    }
}

fn compute_membership(logits: &DMatrix<f64>, params: &DmsaLayerParams) -> Result<Membership> {
    let mut pi = logits.clone();
    if params.sparsity_axis.sparsifies_tokens() {
        match params.activation {
            ActivationKind::SoftThreshold => {
                for mut row in pi.row_iter_mut() {
                    let v: Vec<f64> = row.iter().copied().collect();
                    let projected = soft_threshold(&v)?.values;
                    for (dst, src) in row.iter_mut().zip(projected) {
                        *dst = src;
                    }
                }
            }
            kind => pi.apply(|v| *v = kind.apply_scalar(*v).expect("elementwise activation")),
        }
    } else {
        pi.apply(|v| *v = sigmoid(*v));
    }
    Membership::new(pi)
}

/// Weights shared by the TSSA baseline: value projection, output projection,
/// and the membership temperature `η`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    pub value_proj: DMatrix<f64>,
    pub out_proj: DMatrix<f64>,
    pub out_bias: DVector<f64>,
    pub heads: usize,
    pub eta: f64,
    pub epsilon_fold: bool,
    pub coding: CodingRateConfig,
}

impl BaselineParams {
    pub fn random<R: Rng>(dim: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| normal.sample(rng));
        let params = Self {
            value_proj: draw(dim, dim),
            out_proj: draw(dim, dim),
            out_bias: DVector::zeros(dim),
            heads,
            eta: 0.5,
            epsilon_fold: true,
            coding: CodingRateConfig::default(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.value_proj.nrows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(invalid(format!("dim {d} is not divisible by {} heads", self.heads)));
        }
        if self.value_proj.shape() != (d, d) || self.out_proj.shape() != (d, d) || self.out_bias.len() != d {
            return Err(invalid("baseline projections must be d × d with a length-d bias"));
        }
        if !(self.eta > 0.0) {
            return Err(invalid("eta must be positive"));
        }
        self.coding.validate()
    }
}

/// TSSA: coupled membership `Π_kj = softmax_k(‖w_k[:, j]‖² / (2η))` with the
/// same second-moment scaling as DMSA.
pub fn tssa_layer_forward(
    tokens: &TokenMatrix,
    params: &BaselineParams,
    meter: &mut ActivationMeter,
) -> Result<TokenMatrix> {
    params.validate()?;
    let (d, n, heads) = (params.dim(), tokens.tokens(), params.heads);
    if tokens.dim() != d {
        return Err(invalid(format!("tokens have dim {}, layer expects {d}", tokens.dim())));
    }
    let p = d / heads;
    meter.alloc(d * n);
    let w = &params.value_proj * tokens.matrix();
    meter.alloc(d * n);

    let mut pi = DMatrix::zeros(heads, n);
    for j in 0..n {
        for k in 0..heads {
            pi[(k, j)] = w.view((k * p, j), (p, 1)).norm_squared() / (2.0 * params.eta);
        }
    }
    meter.alloc(heads * n);
    for mut col in pi.column_iter_mut() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let s = col.sum();
        col /= s;
    }
    meter.alloc(heads * n);

    let scale = if params.epsilon_fold {
        1.0
    } else {
        params.coding.coding_scale(d)
    };
    let out = second_moment_scaling(&w, &pi, p, scale, meter);
    meter.alloc(d * n);
    let y = &params.out_proj * out + &params.out_bias * nalgebra::RowDVector::from_element(n, 1.0);
    meter.alloc(d * n);
    finite_output(y, "TSSA")
}

/// Standard multi-head softmax attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaParams {
    pub query_proj: DMatrix<f64>,
    pub key_proj: DMatrix<f64>,
    pub value_proj: DMatrix<f64>,
    pub out_proj: DMatrix<f64>,
    pub out_bias: DVector<f64>,
    pub heads: usize,
}

impl MhsaParams {
    pub fn random<R: Rng>(dim: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| normal.sample(rng));
        let params = Self {
            query_proj: draw(dim, dim),
            key_proj: draw(dim, dim),
            value_proj: draw(dim, dim),
            out_proj: draw(dim, dim),
            out_bias: DVector::zeros(dim),
            heads,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.value_proj.nrows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(invalid(format!("dim {d} is not divisible by {} heads", self.heads)));
        }
        for m in [&self.query_proj, &self.key_proj, &self.value_proj, &self.out_proj] {
            if m.shape() != (d, d) {
                return Err(invalid("MHSA projections must be d × d"));
            }
        }
        if self.out_bias.len() != d {
            return Err(invalid("output bias must have length d"));
        }
        Ok(())
    }
}

/// Row-stochastic `n × n` attention matrices, one per head (row = query).
pub fn mhsa_attention_weights(
    tokens: &TokenMatrix,
    params: &MhsaParams,
    meter: &mut ActivationMeter,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    params.validate()?;
    let (d, n, heads) = (params.dim(), tokens.tokens(), params.heads);
    if tokens.dim() != d {
        return Err(invalid(format!("tokens have dim {}, layer expects {d}", tokens.dim())));
    }
    let p = d / heads;
    let z = tokens.matrix();
    meter.alloc(d * n);
    let q = &params.query_proj * z;
    let k = &params.key_proj * z;
    let v = &params.value_proj * z;
    meter.alloc(3 * d * n);
    let scale = 1.0 / (p as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.rows(h * p, p);
        let kh = k.rows(h * p, p);
        let mut scores = qh.transpose() * kh * scale;
        meter.alloc(n * n);
        for mut row in scores.row_iter_mut() {
            let max = row.max();
            row.apply(|x| *x = (*x - max).exp());
            let s = row.sum();
            row /= s;
        }
        meter.alloc(n * n);
        weights.push(scores);
    }
    Ok((weights, v))
}

/// `Y = W_o concat_h(V_h A_hᵀ) + b_o` with explicit `n × n` attention matrices.
pub fn mhsa_layer_forward(
    tokens: &TokenMatrix,
    params: &MhsaParams,
    meter: &mut ActivationMeter,
) -> Result<TokenMatrix> {
    let (weights, v) = mhsa_attention_weights(tokens, params, meter)?;
    let (d, n) = (params.dim(), tokens.tokens());
    let p = d / params.heads;
    let mut merged = DMatrix::zeros(d, n);
    for (h, a) in weights.iter().enumerate() {
        let out = v.rows(h * p, p) * a.transpose();
        merged.rows_mut(h * p, p).copy_from(&out);
    }
    meter.alloc(d * n);
    let y = &params.out_proj * merged + &params.out_bias * nalgebra::RowDVector::from_element(n, 1.0);
    meter.alloc(d * n);
    finite_output(y, "MHSA")
}

fn finite_output(y: DMatrix<f64>, layer: &str) -> Result<TokenMatrix> {
    if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalFault(format!(
            "{layer} layer produced a non-finite output at channel {}, token {}",
            pos % y.nrows(),
            pos / y.nrows()
        )));
    }
    TokenMatrix::new(y)
}
