//! Browser bindings for three interactive views:
//!
//! * soft-threshold explorer: project a score vector onto the simplex, optionally top-k
//! * memory scaling: counted activation peaks of MHSA, TSSA, and DMSA per token count
//! * membership maps: train a tiny classifier and map each head's membership on a
//!   sample whose left and right halves come from different class subspaces
//!
//! Every export returns a JSON string; the plain functions behind them are
//! usable natively.

use dmst_core::analysis::{membership_maps, profile_peak, ProfileOp};
use dmst_core::model::rng::stream_rng;
use dmst_core::model::{generate_synthetic, subspace_tokens, train, RunConfig};
use dmst_core::sparsify::{soft_threshold, soft_threshold_topk};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest token count the memory view accepts; MHSA at this size counts ~17M floats.
pub const MAX_PROFILE_TOKENS: usize = 2048;

/// Simplex projection of `scores`; `k = 0` means no top-k restriction.
pub fn project(scores: &[f64], k: usize) -> Result<Value, String> {
    let p = if k == 0 {
        soft_threshold(scores)
    } else {
        soft_threshold_topk(scores, k)
    }
    .map_err(|e| e.to_string())?;
    Ok(json!({
        "values": p.values,
        "threshold": p.threshold,
        "support": p.support,
    }))
}

/// Peak counted floats of one forward per operator and token count.
pub fn memory_rows(tokens: &[usize], dim: usize, heads: usize) -> Result<Value, String> {
    if tokens.is_empty() {
        return Err("no token counts given".into());
    }
    if let Some(&n) = tokens.iter().find(|&&n| n == 0 || n > MAX_PROFILE_TOKENS) {
        return Err(format!("token count {n} outside 1..={MAX_PROFILE_TOKENS}"));
    }
    let mut rows = Vec::new();
    for op in ProfileOp::ALL {
        for &n in tokens {
            let peak = profile_peak(op, n, dim, heads, 0).map_err(|e| e.to_string())?;
            rows.push(json!({"op": op.name(), "tokens": n, "peak_floats": peak}));
        }
    }
    Ok(Value::Array(rows))
}

/// Small enough to train in a browser tab within a few seconds.
pub fn demo_config(seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.seed = seed;
    cfg.model.depth = 2;
    cfg.model.dim = 16;
    cfg.model.heads = 4;
    cfg.model.topk = 4;
    cfg.model.token_dim = 16;
    cfg.data.dim = 16;
    cfg.data.subspace_dim = 2;
    cfg.data.samples_per_class = 30;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 16;
    cfg
}

/// Trains the demo model and returns membership maps at `layer` for a
/// two-subspace sample (left half class 0, right half class 1).
pub fn membership_demo(seed: u64, epochs: usize, layer: usize) -> Result<Value, String> {
    let cfg = demo_config(seed, epochs);
    let data = generate_synthetic(&cfg.data, cfg.seed()).map_err(|e| e.to_string())?;
    let outcome = train(&cfg, &data).map_err(|e| e.to_string())?;
    let bases = data.bases.as_ref().ok_or("synthetic data lost its bases")?;
    let grid = cfg.model.grid();
    let group: Vec<usize> = (0..cfg.model.tokens()).map(|j| usize::from(j % grid >= grid / 2)).collect();
    let mut rng = stream_rng(seed, 77);
    let tokens = subspace_tokens(bases, &group, cfg.data.noise, &mut rng);
    let maps = membership_maps(&outcome.model, &tokens, layer).map_err(|e| e.to_string())?;
    Ok(json!({
        "grid": grid,
        "layer": layer,
        "epochs": epochs,
        "test_accuracy": outcome.final_test_accuracy(),
        "groups": group,
        "maps": maps,
    }))
}

fn to_js(result: Result<Value, String>) -> Result<String, JsValue> {
    result.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = projectScores)]
pub fn project_scores(scores: Vec<f64>, k: usize) -> Result<String, JsValue> {
    to_js(project(&scores, k))
}

#[wasm_bindgen(js_name = memoryProfile)]
pub fn memory_profile(tokens: Vec<u32>, dim: usize, heads: usize) -> Result<String, JsValue> {
    let tokens: Vec<usize> = tokens.into_iter().map(|n| n as usize).collect();
    to_js(memory_rows(&tokens, dim, heads))
}

#[wasm_bindgen(js_name = membershipMaps)]
pub fn membership_maps_js(seed: u32, epochs: usize, layer: usize) -> Result<String, JsValue> {
    to_js(membership_demo(u64::from(seed), epochs, layer))
}
