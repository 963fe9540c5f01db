//! The toy classifier: token embedding, class token, pre-norm attention and
//! MLP blocks with residuals, final norm, and a linear head on the class token.

use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::config::ModelConfig;
use super::rng::{stream, stream_rng, truncated_normal};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::attention::{rope_precompute, AttentionKind, RopeTable};
use crate::error::{invalid, Error, Result};
use crate::sparsify::ActivationKind;

/// Standard deviation of the truncated-normal initialization.
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
/// Fixed membership temperature of the TSSA baseline.
pub const TSSA_ETA: f64 = 0.5;
const PI_GUARD: f64 = crate::attention::PI_NORM_GUARD;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, shape, and initialization of one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
    /// Whether AdamW weight decay applies (projection matrices only).
    pub decay: bool,
}

/// Parameter layout of a model, in the order the forward pass consumes it.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, k, h, p) = (cfg.dim, cfg.heads, cfg.hidden_dim(), cfg.head_dim());
    let mut specs = Vec::new();
    let mut add = |name: String, shape, init| {
        let decay = init == Init::Normal && name != "cls_token";
        specs.push(ParamSpec { name, shape, init, decay });
    };
    add("embed.weight".into(), (d, cfg.token_dim), Init::Normal);
    add("embed.bias".into(), (1, d), Init::Zeros);
    add("cls_token".into(), (1, d), Init::Normal);
    for l in 0..cfg.depth {
        let b = format!("blocks.{l}");
        add(format!("{b}.norm1.weight"), (1, d), Init::Ones);
        add(format!("{b}.norm1.bias"), (1, d), Init::Zeros);
        match cfg.attention {
            AttentionKind::Dmsa => {
                add(format!("{b}.attn.value.weight"), (d, d), Init::Normal);
                add(format!("{b}.attn.membership.weight"), (k, d), Init::Normal);
            }
            AttentionKind::Tssa => {
                add(format!("{b}.attn.value.weight"), (d, d), Init::Normal);
            }
            AttentionKind::Mhsa => {
                add(format!("{b}.attn.query.weight"), (d, d), Init::Normal);
                add(format!("{b}.attn.key.weight"), (d, d), Init::Normal);
                add(format!("{b}.attn.value.weight"), (d, d), Init::Normal);
            }
            AttentionKind::GatedChannel => {
                add(format!("{b}.attn.basis.weight"), (p, d), Init::Normal);
                add(format!("{b}.attn.membership.weight"), (k, d), Init::Normal);
            }
        }
        add(format!("{b}.attn.out.weight"), (d, d), Init::Normal);
        add(format!("{b}.attn.out.bias"), (1, d), Init::Zeros);
        add(format!("{b}.norm2.weight"), (1, d), Init::Ones);
        add(format!("{b}.norm2.bias"), (1, d), Init::Zeros);
        add(format!("{b}.mlp.fc1.weight"), (h, d), Init::Normal);
        add(format!("{b}.mlp.fc1.bias"), (1, h), Init::Zeros);
        add(format!("{b}.mlp.fc2.weight"), (d, h), Init::Normal);
        add(format!("{b}.mlp.fc2.bias"), (1, d), Init::Zeros);
    }
    add("norm.weight".into(), (1, d), Init::Ones);
    add("norm.bias".into(), (1, d), Init::Zeros);
    add("head.weight".into(), (cfg.num_classes, d), Init::Normal);
    add("head.bias".into(), (1, cfg.num_classes), Init::Zeros);
    specs
}

/// Quantities recorded for one block by [`Model::trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Membership, `(n+1) × K` with the class token in row 0. `None` for MHSA.
    pub membership: Option<Tensor>,
    /// Per-head gate on the value subspaces; all ones when heads are not gated.
    pub head_gate: Vec<f64>,
    /// Residual stream right after the attention update, `(n+1) × d`.
    pub residual: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct LayerVars {
    membership: Option<Var>,
    gate: Option<Var>,
    residual: Var,
}

/// Per-sample result of [`Model::loss_and_grad`].
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub correct: bool,
    pub grads: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
    rope: Option<Arc<RopeTable>>,
}

impl Model {
    /// Truncated-normal weights (std 0.02), zero biases, unit norm gains,
    /// drawn from the init stream of `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        let mut rng = stream_rng(config.seed, stream::INIT);
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Normal => Tensor::from_fn(s.shape.0, s.shape.1, |_, _| truncated_normal(INIT_STD, &mut rng)),
                Init::Zeros => Tensor::zeros(s.shape.0, s.shape.1),
                Init::Ones => Tensor::full(s.shape.0, s.shape.1, 1.0),
            })
            .collect();
        Self::from_params(config, params)
    }

    /// Builds a model from tensors in [`param_specs`] order.
    pub fn from_params(config: &ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != params.len() {
            return Err(Error::Mismatch(format!(
                "configuration has {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, t) in specs.iter().zip(&params) {
            if s.shape != t.shape() {
                return Err(Error::Mismatch(format!(
                    "{} should be {:?}, got {:?}",
                    s.name,
                    s.shape,
                    t.shape()
                )));
            }
        }
        let rope = if config.rope && config.attention == AttentionKind::Dmsa {
            Some(Arc::new(rope_precompute(config.tokens() + 1, config.dim)?))
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            specs,
            params,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, tokens: &Tensor) -> Result<()> {
        let expected = (self.config.tokens(), self.config.token_dim);
        if tokens.shape() != expected {
            return Err(invalid(format!(
                "input has shape {:?}, model expects {:?} (tokens × token_dim)",
                tokens.shape(),
                expected
            )));
        }
        if !tokens.is_finite() {
            return Err(invalid("input contains non-finite values"));
        }
        Ok(())
    }

    /// Records the forward pass; returns the logit row, the parameter leaves,
    /// and the per-block variables.
    fn build(&self, tape: &mut Tape, tokens: &Tensor) -> Result<(Var, Vec<Var>, Vec<LayerVars>)> {
        self.check_input(tokens)?;
        let leaves: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let mut next = leaves.iter().copied();
        let mut take = || next.next().expect("parameter layout");
        let cfg = &self.config;

        let input = tape.leaf(tokens.clone());
        let (ew, eb, cls) = (take(), take(), take());
        let e = tape.matmul_bt(input, ew);
        let e = tape.add_row(e, eb);
        let mut x = tape.concat_rows(cls, e);

        let mut layers = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let (n1w, n1b) = (take(), take());
            let h = tape.layer_norm(x, n1w, n1b, LN_EPS);
            let (a, membership, gate) = match cfg.attention {
                AttentionKind::Dmsa => {
                    let (wv, wm) = (take(), take());
                    self.dmsa(tape, h, wv, wm)
                }
                AttentionKind::Tssa => {
                    let wv = take();
                    let (a, pi) = tssa(tape, h, wv, cfg.head_dim());
                    (a, Some(pi), None)
                }
                AttentionKind::Mhsa => {
                    let (wq, wk, wv) = (take(), take(), take());
                    (mhsa(tape, h, wq, wk, wv, cfg.heads), None, None)
                }
                AttentionKind::GatedChannel => {
                    let (wb, wm) = (take(), take());
                    let (a, g) = gated(tape, h, wb, wm);
                    (a, Some(g), None)
                }
            };
            let (ow, ob) = (take(), take());
            let a = tape.matmul_bt(a, ow);
            let a = tape.add_row(a, ob);
            x = tape.add(x, a);
            layers.push(LayerVars {
                membership,
                gate,
                residual: x,
            });

            let (n2w, n2b, f1w, f1b, f2w, f2b) = (take(), take(), take(), take(), take(), take());
            let h = tape.layer_norm(x, n2w, n2b, LN_EPS);
            let f = tape.matmul_bt(h, f1w);
            let f = tape.add_row(f, f1b);
            let f = tape.activation(f, ActivationKind::Gelu);
            let f = tape.matmul_bt(f, f2w);
            let f = tape.add_row(f, f2b);
            x = tape.add(x, f);
        }

        let (nw, nb, hw, hb) = (take(), take(), take(), take());
        let c = tape.slice_rows(x, 0, 1);
        let c = tape.layer_norm(c, nw, nb, LN_EPS);
        let logits = tape.matmul_bt(c, hw);
        let logits = tape.add_row(logits, hb);
        if !tape.value(logits).is_finite() {
            return Err(Error::NumericalFault("forward pass produced non-finite logits".into()));
        }
        Ok((logits, leaves, layers))
    }

    /// DMSA on row-major tokens; returns the pre-projection output, `Π`, and the head gate.
    fn dmsa(&self, tape: &mut Tape, h: Var, wv: Var, wm: Var) -> (Var, Option<Var>, Option<Var>) {
        let cfg = &self.config;
        let p = cfg.head_dim();
        let s = tape.matmul_bt(h, wv);
        let r = match &self.rope {
            Some(table) => tape.rope(h, table.clone()),
            None => h,
        };
        let logits = tape.matmul_bt(r, wm);

        let (w, gate) = if cfg.sparsity_axis.gates_heads() {
            let mean = tape.mean_rows(logits);
            let g = match cfg.activation {
                ActivationKind::SoftThreshold => tape.soft_threshold_rows(mean, Some(cfg.topk)),
                kind => tape.activation(mean, kind),
            };
            let g_rep = tape.repeat_cols(g, p);
            (tape.mul_row(s, g_rep), Some(g))
        } else {
            (s, None)
        };

        let pi = if cfg.sparsity_axis.sparsifies_tokens() {
            match cfg.activation {
                ActivationKind::SoftThreshold => {
                    let lt = tape.transpose(logits);
                    let st = tape.soft_threshold_rows(lt, None);
                    tape.transpose(st)
                }
                kind => tape.activation(logits, kind),
            }
        } else {
            tape.activation(logits, ActivationKind::Sigmoid)
        };
        (second_moment_scaling(tape, w, pi, p), Some(pi), gate)
    }

    /// Class logits for one input.
    pub fn logits(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (logits, _, _) = self.build(&mut tape, tokens)?;
        Ok(tape.value(logits).data().to_vec())
    }

    pub fn predict(&self, tokens: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(tokens)?))
    }

    /// Cross-entropy loss of one sample and its gradient for every parameter.
    pub fn loss_and_grad(&self, tokens: &Tensor, label: usize) -> Result<SampleGrad> {
        if label >= self.config.num_classes {
            return Err(invalid(format!("label {label} out of range")));
        }
        let mut tape = Tape::new();
        let (logits, leaves, _) = self.build(&mut tape, tokens)?;
        let correct = argmax(tape.value(logits).data()) == label;
        let loss = tape.cross_entropy(logits, label);
        let loss_value = tape.value(loss).get(0, 0);
        let mut grads = tape.backward(loss);
        let grads = leaves
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
            .collect();
        Ok(SampleGrad {
            loss: loss_value,
            correct,
            grads,
        })
    }

    /// Mean loss and mean gradient over a batch. Per-sample passes may run in
    /// parallel; the reduction is sequential in batch order.
    pub fn batch_grad(&self, batch: &[(&Tensor, usize)]) -> Result<SampleGradBatch> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        #[cfg(feature = "parallel")]
        let per_sample: Vec<Result<SampleGrad>> = batch.par_iter().map(|(t, l)| self.loss_and_grad(t, *l)).collect();
        #[cfg(not(feature = "parallel"))]
        let per_sample: Vec<Result<SampleGrad>> = batch.iter().map(|(t, l)| self.loss_and_grad(t, *l)).collect();

        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let mut loss = 0.0;
        let mut correct = 0;
        for r in per_sample {
            let s = r?;
            loss += s.loss;
            correct += usize::from(s.correct);
            for (acc, g) in grads.iter_mut().zip(&s.grads) {
                acc.add_assign(g);
            }
        }
        for g in &mut grads {
            g.scale_assign(scale);
        }
        Ok(SampleGradBatch {
            loss: loss * scale,
            correct,
            grads,
        })
    }

    /// Forward pass recording each block's membership, gate, and post-attention residual.
    pub fn trace(&self, tokens: &Tensor) -> Result<Vec<LayerTrace>> {
        let mut tape = Tape::new();
        let (_, _, layers) = self.build(&mut tape, tokens)?;
        Ok(layers
            .iter()
            .map(|l| LayerTrace {
                membership: l.membership.map(|v| tape.value(v).clone()),
                head_gate: match l.gate {
                    Some(g) => tape.value(g).data().to_vec(),
                    None => vec![1.0; self.config.heads],
                },
                residual: tape.value(l.residual).clone(),
            })
            .collect())
    }

    /// Floats recorded by one forward pass.
    pub fn activation_floats(&self, tokens: &Tensor) -> Result<usize> {
        let mut tape = Tape::new();
        self.build(&mut tape, tokens)?;
        Ok(tape.activation_floats())
    }
}

/// Batch-averaged loss and gradients.
#[derive(Debug, Clone)]
pub struct SampleGradBatch {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Tensor>,
}

/// `out = −w ⊙ Π ⊙ 1/(1 + dots)` with `dots` the per-channel second moment of
/// `w` under the token-normalized membership of the channel's head.
fn second_moment_scaling(tape: &mut Tape, w: Var, pi: Var, p: usize) -> Var {
    let normalized = tape.normalize_cols(pi, PI_GUARD);
    let n_rep = tape.repeat_cols(normalized, p);
    let w2 = tape.mul(w, w);
    let weighted = tape.mul(n_rep, w2);
    let dots = tape.sum_rows(weighted);
    let attn = tape.reciprocal(dots, 1.0);
    let pi_rep = tape.repeat_cols(pi, p);
    let o = tape.mul(w, pi_rep);
    let o = tape.mul_row(o, attn);
    tape.scale(o, -1.0)
}

/// TSSA: `Π = softmax_k(‖w_k‖² / 2η)` per token.
fn tssa(tape: &mut Tape, h: Var, wv: Var, p: usize) -> (Var, Var) {
    let w = tape.matmul_bt(h, wv);
    let w2 = tape.mul(w, w);
    let energy = tape.sum_col_groups(w2, p);
    let energy = tape.scale(energy, 1.0 / (2.0 * TSSA_ETA));
    let pi = tape.softmax_rows(energy);
    (second_moment_scaling(tape, w, pi, p), pi)
}

fn mhsa(tape: &mut Tape, h: Var, wq: Var, wk: Var, wv: Var, heads: usize) -> Var {
    let q = tape.matmul_bt(h, wq);
    let k = tape.matmul_bt(h, wk);
    let v = tape.matmul_bt(h, wv);
    let d = tape.value(q).cols();
    let p = d / heads;
    let scale = 1.0 / (p as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|i| {
            let qh = tape.slice_cols(q, i * p, p);
            let kh = tape.slice_cols(k, i * p, p);
            let vh = tape.slice_cols(v, i * p, p);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let a = tape.softmax_rows(scores);
            tape.matmul(a, vh)
        })
        .collect();
    tape.concat_cols(&outs)
}

/// Gated channel attention `−Σ_k G_k ⊙ (W_S D_k W_Sᵀ z)` with `G = sigmoid(Z W_πᵀ)`.
fn gated(tape: &mut Tape, h: Var, basis: Var, wm: Var) -> (Var, Var) {
    let proj = tape.matmul_bt(h, basis);
    let logits = tape.matmul_bt(h, wm);
    let g = tape.activation(logits, ActivationKind::Sigmoid);
    let normalized = tape.normalize_cols(g, PI_GUARD);
    let nt = tape.transpose(normalized);
    let p2 = tape.mul(proj, proj);
    let moments = tape.matmul(nt, p2);
    let dk = tape.reciprocal(moments, 1.0);
    let per_token = tape.matmul(g, dk);
    let q = tape.mul(per_token, proj);
    let out = tape.matmul(q, basis);
    (tape.scale(out, -1.0), g)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
