//! Top-k gated mixture-of-experts feed-forward layer.
//!
//! A bias-free linear router maps each token to `E` gate scores, a row
//! softmax turns them into routing probabilities, and the `k` most probable
//! experts run on that token. Their SwiGLU outputs are mixed with the
//! selected probabilities renormalized to sum to one. The auxiliary
//! load-balancing loss is `(1/E) Σₑ fₑ·pₑ`, with `fₑ` the fraction of tokens
//! that selected expert `e` and `pₑ` its mean routing probability.
//!
//! Backprop treats the top-k index sets (and therefore every `fₑ`) as
//! constants. Gradients reach the router through the selected mixture
//! weights and through `pₑ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    matmul, matmul_nt, matmul_tn, silu_grad_scalar, silu_scalar, softmax_backward_row,
    softmax_in_place, Matrix, SeededRng,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub model_dim: usize,
    pub expert_hidden: usize,
    pub alpha: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig::with_model_dim(16)
    }
}

impl MoeConfig {
    /// 4 experts, top-2, hidden width 4·d, α = 0.01.
    pub fn with_model_dim(model_dim: usize) -> Self {
        MoeConfig {
            num_experts: 4,
            top_k: 2,
            model_dim,
            expert_hidden: 4 * model_dim,
            alpha: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "moe.top_k must satisfy 1 <= k <= num_experts (k={}, E={})",
                self.top_k, self.num_experts
            )));
        }
        if self.model_dim == 0 {
            return Err(Error::Config("moe.model_dim must be >= 1".into()));
        }
        if self.expert_hidden == 0 {
            return Err(Error::Config("moe.expert_hidden must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("moe.alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// SwiGLU expert: `(silu(x·W_gate) ⊙ (x·W_up)) · W_down`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl ExpertParams {
    pub fn init(model_dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (model_dim as f64).sqrt();
        ExpertParams {
            w_gate: Matrix::random_normal(model_dim, hidden, scale, rng),
            w_up: Matrix::random_normal(model_dim, hidden, scale, rng),
            w_down: Matrix::random_normal(hidden, model_dim, scale, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ExpertParams {
            w_gate: Matrix::zeros(self.w_gate.rows(), self.w_gate.cols()),
            w_up: Matrix::zeros(self.w_up.rows(), self.w_up.cols()),
            w_down: Matrix::zeros(self.w_down.rows(), self.w_down.cols()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeParams {
    /// Gate-score projection, `d × E`.
    pub w_router: Matrix,
    pub experts: Vec<ExpertParams>,
}

impl MoeParams {
    pub fn init(cfg: &MoeConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let scale = 1.0 / (cfg.model_dim as f64).sqrt();
        let w_router = Matrix::random_normal(cfg.model_dim, cfg.num_experts, scale, rng);
        let experts = (0..cfg.num_experts)
            .map(|_| ExpertParams::init(cfg.model_dim, cfg.expert_hidden, rng))
            .collect();
        Ok(MoeParams { w_router, experts })
    }

    pub fn zeros_like(&self) -> Self {
        MoeParams {
            w_router: Matrix::zeros(self.w_router.rows(), self.w_router.cols()),
            experts: self.experts.iter().map(ExpertParams::zeros_like).collect(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self, cfg: &MoeConfig) -> Result<()> {
        let (d, e, h) = (cfg.model_dim, cfg.num_experts, cfg.expert_hidden);
        if self.w_router.shape() != (d, e) || self.experts.len() != e {
            return Err(Error::shape(
                "moe_params",
                format!(
                    "router {:?} with {} experts, config wants ({d}, {e}) with {e}",
                    self.w_router.shape(),
                    self.experts.len()
                ),
            ));
        }
        for (i, ex) in self.experts.iter().enumerate() {
            if ex.w_gate.shape() != (d, h) || ex.w_up.shape() != (d, h) || ex.w_down.shape() != (h, d) {
                return Err(Error::shape("moe_params", format!("expert {i} does not match d={d}, h={h}")));
            }
        }
        Ok(())
    }

    /// Router first, then each expert's gate, up and down projections.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("moe.router".to_string(), &self.w_router)];
        for (i, e) in self.experts.iter().enumerate() {
            out.push((format!("moe.expert{i}.gate"), &e.w_gate));
            out.push((format!("moe.expert{i}.up"), &e.w_up));
            out.push((format!("moe.expert{i}.down"), &e.w_down));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.w_router];
        for e in &mut self.experts {
            out.push(&mut e.w_gate);
            out.push(&mut e.w_up);
            out.push(&mut e.w_down);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    /// `self += s · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &MoeParams, s: f64) -> Result<()> {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.add_scaled(src, s)?;
        }
        Ok(())
    }

    /// FNV-1a over every value's bit pattern; identifies the exact weights a
    /// forward cache was computed with.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, m) in self.tensors() {
            for v in m.as_slice() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Routing outcome for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub probs: Vec<f64>,
    /// Expert indices, most probable first.
    pub selected: Vec<usize>,
    /// Mixture weights aligned with `selected`; they sum to one.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadBalanceStats {
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub loss: f64,
}

pub fn gate_scores(h_in: &Matrix, params: &MoeParams) -> Result<Matrix> {
    if h_in.cols() != params.w_router.rows() {
        return Err(Error::shape(
            "gate_scores",
            format!("input width {} vs router rows {}", h_in.cols(), params.w_router.rows()),
        ));
    }
    matmul(h_in, &params.w_router)
}

/// Indices of the `k` largest entries, largest first; equal values keep the
/// lower index first.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn decision_for(probs: Vec<f64>, selected: Vec<usize>) -> RoutingDecision {
    let mass: f64 = selected.iter().map(|&e| probs[e]).sum();
    let weights = selected.iter().map(|&e| probs[e] / mass).collect();
    RoutingDecision {
        probs,
        selected,
        weights,
    }
}

pub fn route(g: &Matrix, k: usize) -> Result<Vec<RoutingDecision>> {
    let e = g.cols();
    if k == 0 || k > e {
        return Err(Error::Config(format!("top_k {k} out of range for {e} experts")));
    }
    Ok((0..g.rows())
        .map(|t| {
            let mut probs = g.row(t).to_vec();
            softmax_in_place(&mut probs);
            let selected = top_k_indices(&probs, k);
            decision_for(probs, selected)
        })
        .collect())
}

/// Like [`route`] but with the expert sets supplied by the caller. Used to
/// evaluate the loss with routing frozen, as finite-difference checks must.
pub fn route_fixed(g: &Matrix, selection: &[Vec<usize>]) -> Result<Vec<RoutingDecision>> {
    if selection.len() != g.rows() {
        return Err(Error::shape(
            "route_fixed",
            format!("{} selections for {} tokens", selection.len(), g.rows()),
        ));
    }
    let e = g.cols();
    selection
        .iter()
        .enumerate()
        .map(|(t, sel)| {
            let mut seen = vec![false; e];
            for &i in sel {
                if i >= e || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Input(format!("token {t}: invalid expert set {sel:?}")));
                }
            }
            if sel.is_empty() {
                return Err(Error::Input(format!("token {t}: empty expert set")));
            }
            let mut probs = g.row(t).to_vec();
            softmax_in_place(&mut probs);
            Ok(decision_for(probs, sel.clone()))
        })
        .collect()
}

/// Activations retained by [`expert_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ExpertCache {
    input: Matrix,
    gate_pre: Matrix,
    up: Matrix,
    hidden: Matrix,
}

pub fn expert_forward(x: &Matrix, e: &ExpertParams) -> Result<(Matrix, ExpertCache)> {
    let gate_pre = matmul(x, &e.w_gate)?;
    let up = matmul(x, &e.w_up)?;
    let hidden = gate_pre.map(silu_scalar).hadamard(&up)?;
    let y = matmul(&hidden, &e.w_down)?;
    Ok((
        y,
        ExpertCache {
            input: x.clone(),
            gate_pre,
            up,
            hidden,
        },
    ))
}

/// Parameter gradients of one expert given `∂L/∂y`.
pub fn expert_backward(cache: &ExpertCache, e: &ExpertParams, upstream: &Matrix) -> Result<ExpertParams> {
    let w_down = matmul_tn(&cache.hidden, upstream)?;
    let d_hidden = matmul_nt(upstream, &e.w_down)?;
    let mut d_gate = d_hidden.clone();
    let mut d_up = d_hidden;
    for (((dg, du), &a), &b) in d_gate
        .as_mut_slice()
        .iter_mut()
        .zip(d_up.as_mut_slice())
        .zip(cache.gate_pre.as_slice())
        .zip(cache.up.as_slice())
    {
        let dh = *dg;
        *dg = dh * b * silu_grad_scalar(a);
        *du = dh * silu_scalar(a);
    }
    Ok(ExpertParams {
        w_gate: matmul_tn(&cache.input, &d_gate)?,
        w_up: matmul_tn(&cache.input, &d_up)?,
        w_down,
    })
}

/// Tokens dispatched to one expert in a forward pass.
#[derive(Clone, Debug)]
struct Dispatch {
    tokens: Vec<usize>,
    /// Position of this expert inside each token's `selected` list.
    slots: Vec<usize>,
    output: Matrix,
    cache: ExpertCache,
}

#[derive(Clone, Debug)]
pub struct MoeCache {
    tokens: usize,
    model_dim: usize,
    top_k: usize,
    params_fingerprint: u64,
    decisions: Vec<RoutingDecision>,
    dispatch: Vec<Option<Dispatch>>,
    stats: LoadBalanceStats,
    h_in: Matrix,
}

impl MoeCache {
    /// How many times each expert's forward ran. Zero for experts that no
    /// token selected.
    pub fn expert_invocations(&self) -> Vec<usize> {
        self.dispatch.iter().map(|d| usize::from(d.is_some())).collect()
    }

    /// Tokens routed to each expert.
    pub fn expert_token_counts(&self) -> Vec<usize> {
        self.dispatch
            .iter()
            .map(|d| d.as_ref().map_or(0, |d| d.tokens.len()))
            .collect()
    }

    pub fn stats(&self) -> &LoadBalanceStats {
        &self.stats
    }

    pub fn decisions(&self) -> &[RoutingDecision] {
        &self.decisions
    }

    pub fn selection(&self) -> Vec<Vec<usize>> {
        self.decisions.iter().map(|d| d.selected.clone()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub y: Matrix,
    pub decisions: Vec<RoutingDecision>,
    pub stats: LoadBalanceStats,
    pub cache: MoeCache,
}

pub fn moe_forward(h_in: &Matrix, params: &MoeParams, cfg: &MoeConfig) -> Result<MoeOutput> {
    moe_forward_with_selection(h_in, params, cfg, None)
}

/// Forward pass; `selection`, when given, overrides top-k per token.
pub fn moe_forward_with_selection(
    h_in: &Matrix,
    params: &MoeParams,
    cfg: &MoeConfig,
    selection: Option<&[Vec<usize>]>,
) -> Result<MoeOutput> {
    cfg.validate()?;
    params.validate(cfg)?;
    let g = gate_scores(h_in, params)?;
    let decisions = match selection {
        Some(sel) => route_fixed(&g, sel)?,
        None => route(&g, cfg.top_k)?,
    };
    let stats = load_balance_loss(&decisions, cfg.num_experts, cfg.top_k)?;

    let mut routed: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); cfg.num_experts];
    for (t, d) in decisions.iter().enumerate() {
        for (slot, &e) in d.selected.iter().enumerate() {
            routed[e].0.push(t);
            routed[e].1.push(slot);
        }
    }

    let mut y = Matrix::zeros(h_in.rows(), h_in.cols());
    let mut dispatch = Vec::with_capacity(cfg.num_experts);
    for (e, (tokens, slots)) in routed.into_iter().enumerate() {
        if tokens.is_empty() {
            dispatch.push(None);
            continue;
        }
        let x = h_in.gather_rows(&tokens);
        let (out, cache) = expert_forward(&x, &params.experts[e])?;
        for (r, (&t, &slot)) in tokens.iter().zip(&slots).enumerate() {
            let w = decisions[t].weights[slot];
            for (acc, &v) in y.row_mut(t).iter_mut().zip(out.row(r)) {
                *acc += w * v;
            }
        }
        dispatch.push(Some(Dispatch {
            tokens,
            slots,
            output: out,
            cache,
        }));
    }

    let cache = MoeCache {
        tokens: h_in.rows(),
        model_dim: h_in.cols(),
        top_k: cfg.top_k,
        params_fingerprint: params.fingerprint(),
        decisions: decisions.clone(),
        dispatch,
        stats: stats.clone(),
        h_in: h_in.clone(),
    };
    Ok(MoeOutput {
        y,
        decisions,
        stats,
        cache,
    })
}

pub fn load_balance_loss(decisions: &[RoutingDecision], num_experts: usize, top_k: usize) -> Result<LoadBalanceStats> {
    if decisions.is_empty() {
        return Err(Error::NoTokens);
    }
    let t = decisions.len() as f64;
    let mut f = vec![0.0; num_experts];
    let mut p = vec![0.0; num_experts];
    for (i, d) in decisions.iter().enumerate() {
        if d.probs.len() != num_experts || d.selected.len() != top_k {
            return Err(Error::Contract(format!(
                "token {i}: decision has {} probs / {} selected, expected {num_experts} / {top_k}",
                d.probs.len(),
                d.selected.len()
            )));
        }
        for &e in &d.selected {
            f[e] += 1.0;
        }
        for (acc, &r) in p.iter_mut().zip(&d.probs) {
            *acc += r;
        }
    }
    for v in f.iter_mut().chain(p.iter_mut()) {
        *v /= t;
    }
    let loss = f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() / num_experts as f64;
    Ok(LoadBalanceStats { f, p, loss })
}

/// Gradients of `upstream·y + α·L_balance` with respect to every MoE
/// parameter, given the cache from the forward pass that produced `y`.
pub fn moe_backward(upstream: &Matrix, cache: &MoeCache, params: &MoeParams, alpha: f64) -> Result<MoeParams> {
    if upstream.shape() != (cache.tokens, cache.model_dim) {
        return Err(Error::Contract(format!(
            "upstream {:?} does not match cached output ({}, {})",
            upstream.shape(),
            cache.tokens,
            cache.model_dim
        )));
    }
    if params.fingerprint() != cache.params_fingerprint || params.num_experts() != cache.dispatch.len() {
        return Err(Error::Contract(
            "cache was produced with different MoE parameters".into(),
        ));
    }
    let num_experts = params.num_experts();
    let tokens = cache.tokens;
    let mut grads = params.zeros_like();

    // ∂L/∂(mixture weight) for every (token, slot): upstream_t · expert output.
    let mut d_weight = vec![vec![0.0; cache.top_k]; tokens];
    for (e, d) in cache.dispatch.iter().enumerate() {
        let Some(d) = d else { continue };
        let mut d_out = Matrix::zeros(d.tokens.len(), cache.model_dim);
        for (r, (&t, &slot)) in d.tokens.iter().zip(&d.slots).enumerate() {
            let w = cache.decisions[t].weights[slot];
            for (o, &u) in d_out.row_mut(r).iter_mut().zip(upstream.row(t)) {
                *o = w * u;
            }
            d_weight[t][slot] = crate::numerics::dot(upstream.row(t), d.output.row(r));
        }
        grads.experts[e] = expert_backward(&d.cache, &params.experts[e], &d_out)?;
    }

    // Balance path: ∂(α L_bal)/∂r_{t,e} = α fₑ / (E·T), constant over tokens.
    let balance_coef: Vec<f64> = cache
        .stats
        .f
        .iter()
        .map(|f| alpha * f / (num_experts as f64 * tokens as f64))
        .collect();

    let mut d_scores = Matrix::zeros(tokens, num_experts);
    let mut d_probs = vec![0.0; num_experts];
    let mut row_grad = vec![0.0; num_experts];
    for (t, dec) in cache.decisions.iter().enumerate() {
        // The renormalized weights are a softmax over the selected scores.
        let inner: f64 = dec.weights.iter().zip(&d_weight[t]).map(|(w, a)| w * a).sum();
        let out = d_scores.row_mut(t);
        for (slot, &e) in dec.selected.iter().enumerate() {
            out[e] += dec.weights[slot] * (d_weight[t][slot] - inner);
        }
        if alpha != 0.0 {
            d_probs.copy_from_slice(&balance_coef);
            softmax_backward_row(&dec.probs, &d_probs, &mut row_grad);
            for (o, g) in out.iter_mut().zip(&row_grad) {
                *o += g;
            }
        }
    }
    grads.w_router = matmul_tn(&cache.h_in, &d_scores)?;
    Ok(grads)
}
