//! Layer-wise coding-rate curves, membership maps, and activation-memory profiles.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    mhsa_layer_forward, tssa_layer_forward, dmsa_layer_forward_traced, AttentionKind, BaselineParams,
    DmsaLayerParams, DmsaOverrides, MhsaParams,
};
use crate::coding_rate::{rate_variational_decoupled, CodingRateConfig, Membership, SubspaceBank, TokenMatrix};
use crate::error::{invalid, Result};
use crate::memory::ActivationMeter;
use crate::model::{LayerTrace, Model, Tensor};
use crate::pgm::{to_grey, PgmImage};

/// Mean variational compression term per attention layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCurve {
    pub values: Vec<f64>,
    pub samples: usize,
}

impl RateCurve {
    /// Fraction of consecutive layer pairs whose rate does not increase.
    pub fn non_increasing_fraction(&self) -> f64 {
        let pairs = self.values.len().saturating_sub(1);
        if pairs == 0 {
            return 0.0;
        }
        let ok = self.values.windows(2).filter(|w| w[1] <= w[0]).count();
        ok as f64 / pairs as f64
    }

    /// `layer,rate`, layers counted from zero.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,rate\n");
        for (l, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{l},{v:.6}");
        }
        s
    }
}

/// Subspaces `U_k^S = g_k W_kᵀ` used by block `layer`, `W_k` the value rows of head `k`.
pub fn layer_subspaces(model: &Model, layer: usize, gate: &[f64]) -> Result<SubspaceBank> {
    let cfg = model.config();
    let p = cfg.head_dim();
    let prefix = format!("blocks.{layer}.attn");
    let bases = match cfg.attention {
        AttentionKind::Dmsa | AttentionKind::Tssa => {
            let w = model
                .param(&format!("{prefix}.value.weight"))
                .ok_or_else(|| invalid(format!("layer {layer} does not exist")))?;
            (0..cfg.heads)
                .map(|k| DMatrix::from_fn(cfg.dim, p, |i, a| w.get(k * p + a, i) * gate[k]))
                .collect()
        }
        AttentionKind::GatedChannel => {
            let w = model
                .param(&format!("{prefix}.basis.weight"))
                .ok_or_else(|| invalid(format!("layer {layer} does not exist")))?;
            (0..cfg.heads)
                .map(|k| DMatrix::from_fn(cfg.dim, p, |i, a| w.get(a, i) * gate[k]))
                .collect()
        }
        AttentionKind::Mhsa => return Err(invalid("MHSA has no membership, so no variational rate")),
    };
    SubspaceBank::new(bases)
}

/// `R_cf^var` of the post-attention residual stream of every block for one input.
pub fn sample_rates(model: &Model, tokens: &Tensor) -> Result<Vec<f64>> {
    if model.config().attention == AttentionKind::Mhsa {
        return Err(invalid("MHSA has no membership, so no variational rate"));
    }
    let cfg = CodingRateConfig::default();
    model
        .trace(tokens)?
        .iter()
        .enumerate()
        .map(|(l, t)| layer_rate(model, l, t, &cfg))
        .collect()
}

fn layer_rate(model: &Model, layer: usize, t: &LayerTrace, cfg: &CodingRateConfig) -> Result<f64> {
    let pi = t.membership.as_ref().expect("membership present for non-MHSA");
    let z = TokenMatrix::from_token_rows(t.residual.data(), t.residual.rows(), t.residual.cols())?;
    let pi = Membership::new(DMatrix::from_row_slice(pi.cols(), pi.rows(), pi.transpose().data()))?;
    let bank = layer_subspaces(model, layer, &t.head_gate)?;
    rate_variational_decoupled(&z, &pi, &bank, cfg)
}

/// Per-layer rates averaged over `inputs`.
pub fn rate_curve(model: &Model, inputs: &[&Tensor]) -> Result<RateCurve> {
    if inputs.is_empty() {
        return Err(invalid("a rate curve needs at least one sample"));
    }
    let mut sums = vec![0.0; model.config().depth];
    for x in inputs {
        for (s, r) in sums.iter_mut().zip(sample_rates(model, x)?) {
            *s += r;
        }
    }
    let n = inputs.len() as f64;
    Ok(RateCurve {
        values: sums.into_iter().map(|s| s / n).collect(),
        samples: inputs.len(),
    })
}

/// One head's membership over the non-class tokens, laid out on the patch grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MembershipMap {
    pub layer: usize,
    pub head: usize,
    pub grid: [usize; 2],
    /// Row-major grid values.
    pub values: Vec<f64>,
}

impl MembershipMap {
    pub fn to_pgm(&self) -> PgmImage {
        PgmImage::new(self.grid[1], self.grid[0], to_grey(&self.values)).expect("grid matches values")
    }
}

/// Membership maps of every head at block `layer`.
pub fn membership_maps(model: &Model, tokens: &Tensor, layer: usize) -> Result<Vec<MembershipMap>> {
    let cfg = model.config();
    if layer >= cfg.depth {
        return Err(invalid(format!("layer {layer} out of range (model has {} layers)", cfg.depth)));
    }
    let trace = model.trace(tokens)?;
    let pi = trace[layer]
        .membership
        .as_ref()
        .ok_or_else(|| invalid("MHSA has no membership to map"))?;
    let g = cfg.grid();
    Ok((0..cfg.heads)
        .map(|k| MembershipMap {
            layer,
            head: k,
            grid: [g, g],
            values: (1..pi.rows()).map(|j| pi.get(j, k)).collect(),
        })
        .collect())
}

/// Writes `head_<k>.pgm` per head and `membership.json` with the raw values.
pub fn write_membership_maps(maps: &[MembershipMap], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in maps {
        m.to_pgm().write(dir.join(format!("head_{}.pgm", m.head)))?;
    }
    let json = serde_json::to_string_pretty(maps).map_err(|e| invalid(e.to_string()))?;
    fs::write(dir.join("membership.json"), json)?;
    Ok(())
}

/// Operators available to the memory profiler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProfileOp {
    Mhsa,
    Tssa,
    Dmsa,
}

impl ProfileOp {
    pub const ALL: [ProfileOp; 3] = [ProfileOp::Mhsa, ProfileOp::Tssa, ProfileOp::Dmsa];

    pub fn name(self) -> &'static str {
        match self {
            ProfileOp::Mhsa => "mhsa",
            ProfileOp::Tssa => "tssa",
            ProfileOp::Dmsa => "dmsa",
        }
    }
}

impl fmt::Display for ProfileOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProfileOp {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mhsa" => Ok(ProfileOp::Mhsa),
            "tssa" => Ok(ProfileOp::Tssa),
            "dmsa" => Ok(ProfileOp::Dmsa),
            other => Err(invalid(format!("unknown operator '{other}'"))),
        }
    }
}

/// Peak counted activation floats of one instrumented forward over `tokens` random tokens.
pub fn profile_peak(op: ProfileOp, tokens: usize, dim: usize, heads: usize, seed: u64) -> Result<usize> {
    if tokens == 0 {
        return Err(invalid("token count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = TokenMatrix::new(DMatrix::from_fn(dim, tokens, |_, _| {
        crate::model::rng::standard_normal(&mut rng)
    }))?;
    let std = 1.0 / (dim as f64).sqrt();
    let mut meter = ActivationMeter::new();
    match op {
        ProfileOp::Mhsa => {
            let params = MhsaParams::random(dim, heads, std, &mut rng)?;
            mhsa_layer_forward(&z, &params, &mut meter)?;
        }
        ProfileOp::Tssa => {
            let params = BaselineParams::random(dim, heads, std, &mut rng)?;
            tssa_layer_forward(&z, &params, &mut meter)?;
        }
        ProfileOp::Dmsa => {
            let mut params = DmsaLayerParams::random(dim, heads, std, &mut rng)?;
            if tokens > params.rope.as_ref().map_or(0, |t| t.max_len()) {
                params.rope = Some(crate::attention::rope_precompute(tokens, dim)?);
            }
            dmsa_layer_forward_traced(&z, &params, DmsaOverrides::default(), &mut meter)?;
        }
    }
    Ok(meter.peak())
}

/// Growth factor per doubling of `n` between two measurements:
/// `(peak₂/peak₁)^(1/log₂(n₂/n₁))`.
pub fn doubling_ratio(n1: usize, peak1: usize, n2: usize, peak2: usize) -> f64 {
    let doublings = (n2 as f64 / n1 as f64).log2();
    (peak2 as f64 / peak1 as f64).powf(1.0 / doublings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: 3,
            dim: 8,
            heads: 2,
            topk: 2,
            mlp_ratio: 2.0,
            image_size: 4,
            patch_size: 2,
            token_dim: 5,
            num_classes: 2,
            seed: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn untrained_curve_is_finite_and_nonnegative() {
        let model = Model::init(&tiny()).unwrap();
        let x = Tensor::from_fn(4, 5, |i, j| ((i * 5 + j) as f64).sin());
        let curve = rate_curve(&model, &[&x]).unwrap();
        assert_eq!(curve.values.len(), 3);
        assert!(curve.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(curve.to_csv().starts_with("layer,rate\n0,"));
        assert!(rate_curve(&model, &[]).is_err());
    }

    #[test]
    fn membership_maps_cover_the_grid() {
        let model = Model::init(&tiny()).unwrap();
        let x = Tensor::from_fn(4, 5, |i, j| ((i + 2 * j) as f64).cos());
        let maps = membership_maps(&model, &x, 1).unwrap();
        assert_eq!(maps.len(), 2);
        assert!(maps.iter().all(|m| m.values.len() == 4 && m.grid == [2, 2]));
        assert!(membership_maps(&model, &x, 3).is_err());
    }

    #[test]
    fn fraction_of_non_increasing_pairs() {
        let c = RateCurve {
            values: vec![3.0, 2.0, 2.5, 2.5],
            samples: 1,
        };
        assert!((c.non_increasing_fraction() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn linear_operators_grow_linearly() {
        for op in [ProfileOp::Dmsa, ProfileOp::Tssa] {
            let a = profile_peak(op, 64, 8, 2, 0).unwrap();
            let b = profile_peak(op, 128, 8, 2, 0).unwrap();
            let r = doubling_ratio(64, a, 128, b);
            assert!((1.8..=2.2).contains(&r), "{op}: {r}");
        }
    }
}
