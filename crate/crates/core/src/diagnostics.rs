//! Expert-utilization statistics over a dataset.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::moe::{load_balance_loss, RoutingDecision};
use crate::sft::SftExample;
use crate::train::batch_from_examples;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    pub num_experts: usize,
    pub top_k: usize,
    /// Non-padding tokens routed.
    pub tokens: usize,
    /// Fraction of tokens that selected each expert.
    pub f: Vec<f64>,
    /// Mean routing probability per expert.
    pub p: Vec<f64>,
    pub balance_loss: f64,
    /// Tokens per expert, i.e. `f_e · tokens`.
    pub assignments: Vec<usize>,
}

/// Routes every real token of `examples` through the model's MoE layer and
/// summarizes the decisions. Padding positions are skipped.
pub fn route_stats(model: &Model, examples: &[SftExample], batch_size: usize) -> Result<RouteStats> {
    let cfg = &model.config().moe;
    let mut decisions: Vec<RoutingDecision> = Vec::new();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = batch_from_examples(chunk)?;
        let out = model.forward(&batch)?;
        let l = batch.seq_len();
        for (b, ex) in chunk.iter().enumerate() {
            let real = ex.tokens().len();
            decisions.extend_from_slice(&out.decisions[b * l..b * l + real]);
        }
    }
    let stats = load_balance_loss(&decisions, cfg.num_experts, cfg.top_k)?;
    let mut assignments = vec![0usize; cfg.num_experts];
    for d in &decisions {
        for &e in &d.selected {
            assignments[e] += 1;
        }
    }
    Ok(RouteStats {
        num_experts: cfg.num_experts,
        top_k: cfg.top_k,
        tokens: decisions.len(),
        f: stats.f,
        p: stats.p,
        balance_loss: stats.loss,
        assignments,
    })
}

impl fmt::Display for RouteStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "tokens {}  experts {}  top_k {}  balance loss {:.6}  (uniform {:.6}, collapsed {:.6})",
            self.tokens,
            self.num_experts,
            self.top_k,
            self.balance_loss,
            self.top_k as f64 / (self.num_experts * self.num_experts) as f64,
            1.0 / self.num_experts as f64
        )?;
        const BAR: usize = 40;
        writeln!(f, "{:<7} {:>9} {:>9} {:>9}", "expert", "f_e", "p_e", "tokens")?;
        for e in 0..self.num_experts {
            // f_e ≤ 1, so the bar is scaled to its maximum possible value
            let n = (self.f[e] * BAR as f64).round() as usize;
            writeln!(
                f,
                "{:<7} {:>9.4} {:>9.4} {:>9}  {}",
                e,
                self.f[e],
                self.p[e],
                self.assignments[e],
                "#".repeat(n.min(BAR))
            )?;
        }
        writeln!(
            f,
            "sum f = {:.9}  sum p = {:.9}",
            self.f.iter().sum::<f64>(),
            self.p.iter().sum::<f64>()
        )
    }
}
