//! WebAssembly bindings for the browser demo. Each operation is a plain
//! function returning JSON so it can be tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use momoe::moa::parse_label;
use momoe::moe::{load_balance_loss, route};
use momoe::numerics::{Matrix, SeededRng};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Routes tokens given their gate scores. `scores_json` is a list of rows,
/// one per token, each with one score per expert.
pub fn route_tokens(scores_json: &str, top_k: usize) -> Result<String, String> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(scores_json).map_err(|e| format!("scores: {e}"))?;
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    if refs.is_empty() || refs[0].is_empty() {
        return Err("need at least one token with at least one score".into());
    }
    if refs.iter().any(|r| r.len() != refs[0].len()) {
        return Err("every token needs the same number of scores".into());
    }
    let g = Matrix::from_rows(&refs);
    let decisions = route(&g, top_k).map_err(|e| e.to_string())?;
    let stats = load_balance_loss(&decisions, g.cols(), top_k).map_err(|e| e.to_string())?;
    Ok(json!({ "decisions": decisions, "stats": stats }).to_string())
}

/// Balance statistics for synthetic traffic. Each token's gate scores are
/// standard normal plus `skew` added to expert 0, so `skew = 0` gives
/// near-uniform routing and large skews collapse onto one expert.
pub fn balance_sweep(num_experts: usize, top_k: usize, tokens: usize, skew: f64, seed: u64) -> Result<String, String> {
    if tokens == 0 || tokens > 100_000 {
        return Err("tokens must be between 1 and 100000".into());
    }
    if num_experts == 0 || num_experts > 64 {
        return Err("experts must be between 1 and 64".into());
    }
    let mut rng = SeededRng::new(seed);
    let mut g = Matrix::zeros(tokens, num_experts);
    for t in 0..tokens {
        for e in 0..num_experts {
            g.row_mut(t)[e] = rng.normal() + if e == 0 { skew } else { 0.0 };
        }
    }
    let decisions = route(&g, top_k).map_err(|e| e.to_string())?;
    let stats = load_balance_loss(&decisions, num_experts, top_k).map_err(|e| e.to_string())?;
    let e = num_experts as f64;
    Ok(json!({
        "f": stats.f,
        "p": stats.p,
        "loss": stats.loss,
        "uniform": top_k as f64 / (e * e),
        "collapsed": 1.0 / e,
    })
    .to_string())
}

/// The label an aggregator reply resolves to, or null.
pub fn parse_reply(text: &str) -> String {
    let label = parse_label(text).map_or(Value::Null, |l| Value::from(l.word()));
    json!({ "label": label }).to_string()
}

#[wasm_bindgen(js_name = routeTokens)]
pub fn route_tokens_js(scores_json: &str, top_k: usize) -> Result<String, JsError> {
    route_tokens(scores_json, top_k).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = balanceSweep)]
pub fn balance_sweep_js(num_experts: usize, top_k: usize, tokens: usize, skew: f64, seed: u32) -> Result<String, JsError> {
    balance_sweep(num_experts, top_k, tokens, skew, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = parseReply)]
pub fn parse_reply_js(text: &str) -> String {
    parse_reply(text)
}
