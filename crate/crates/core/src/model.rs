//! Small causal decoder whose last block swaps its feed-forward network for
//! the mixture-of-experts layer.
//!
//! Layout per sequence: token + learned position embeddings, `P − 1`
//! pre-norm blocks (causal multi-head attention, SwiGLU FFN), then a final
//! block `x_attn = attn(x) + x`, `y = moe(x_attn) + x_attn`, followed by an
//! RMS norm and the LM head. Only the MoE tensors are trainable; everything
//! upstream of the MoE input is frozen, so backprop runs only through
//! head → final norm → residual → MoE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{
    expert_forward, moe_backward, moe_forward_with_selection, ExpertParams, LoadBalanceStats,
    MoeCache, MoeConfig, MoeParams, RoutingDecision,
};
use crate::numerics::{
    cross_entropy, log_softmax, matmul, matmul_nt, rmsnorm, rmsnorm_backward, softmax_in_place,
    Matrix, SeededRng,
};
use crate::sft::{byte_ids, SentimentLabel, BOS, EOS, PAD, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    /// Total blocks including the final MoE block.
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub moe: MoeConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::small(16, 2, 2, 192)
    }
}

impl ModelConfig {
    /// Byte vocabulary, default MoE settings for width `d`.
    pub fn small(model_dim: usize, num_layers: usize, num_heads: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            model_dim,
            num_layers,
            num_heads,
            max_seq_len,
            moe: MoeConfig::with_model_dim(model_dim),
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model.model_dim ({}) must be divisible by model.num_heads ({})",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("model.max_seq_len must be >= 2".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("model.vocab_size must be >= 4".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("model.num_layers must be >= 1".into()));
        }
        if self.moe.model_dim != self.model_dim {
            return Err(Error::Config(format!(
                "moe.model_dim ({}) must equal model.model_dim ({})",
                self.moe.model_dim, self.model_dim
            )));
        }
        self.moe.validate()
    }
}

/// `B × L` token ids with a next-token loss mask over input positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    ids: Vec<Vec<u32>>,
    loss_mask: Vec<Vec<bool>>,
}

impl TokenBatch {
    pub fn new(ids: Vec<Vec<u32>>, loss_mask: Vec<Vec<bool>>) -> Result<Self> {
        let len = ids.first().map_or(0, Vec::len);
        if ids.is_empty() || len == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if ids.len() != loss_mask.len()
            || ids.iter().zip(&loss_mask).any(|(i, m)| i.len() != len || m.len() != len)
        {
            return Err(Error::Input("batch ids and mask must form equal B×L grids".into()));
        }
        Ok(TokenBatch { ids, loss_mask })
    }

    /// Right-pads ragged sequences with PAD; padded positions are unmasked.
    pub fn padded(seqs: Vec<(Vec<u32>, Vec<bool>)>) -> Result<Self> {
        let len = seqs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let (ids, masks) = seqs
            .into_iter()
            .map(|(mut s, mut m)| {
                s.resize(len, PAD);
                m.resize(len, false);
                (s, m)
            })
            .unzip();
        TokenBatch::new(ids, masks)
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.ids[0].len()
    }

    pub fn num_tokens(&self) -> usize {
        self.batch_size() * self.seq_len()
    }

    pub fn ids(&self) -> &[Vec<u32>] {
        &self.ids
    }

    pub fn loss_mask(&self) -> &[Vec<bool>] {
        &self.loss_mask
    }

    /// Flattened next-token targets and mask; the last position of every
    /// sequence has no target and is never scored.
    pub fn targets(&self) -> (Vec<usize>, Vec<bool>) {
        let l = self.seq_len();
        let mut targets = Vec::with_capacity(self.num_tokens());
        let mut mask = Vec::with_capacity(self.num_tokens());
        for (ids, m) in self.ids.iter().zip(&self.loss_mask) {
            for i in 0..l {
                if i + 1 < l {
                    targets.push(ids[i + 1] as usize);
                    mask.push(m[i]);
                } else {
                    targets.push(PAD as usize);
                    mask.push(false);
                }
            }
        }
        (targets, mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl Attention {
    fn init(d: usize, rng: &mut SeededRng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Attention {
            norm: Matrix::filled(1, d, 1.0),
            wq: Matrix::random_normal(d, d, s, rng),
            wk: Matrix::random_normal(d, d, s, rng),
            wv: Matrix::random_normal(d, d, s, rng),
            wo: Matrix::random_normal(d, d, s, rng),
        }
    }

    /// Causal self-attention over one sequence (`L × d`), pre-normed.
    fn forward(&self, x: &Matrix, heads: usize) -> Result<Matrix> {
        let (l, d) = x.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let xn = rmsnorm(x, &self.norm)?;
        let q = matmul(&xn, &self.wq)?;
        let k = matmul(&xn, &self.wk)?;
        let v = matmul(&xn, &self.wv)?;
        let mut ctx = Matrix::zeros(l, d);
        for h in 0..heads {
            let (qh, kh, vh) = (q.columns(h * dh, dh), k.columns(h * dh, dh), v.columns(h * dh, dh));
            let mut scores = matmul_nt(&qh, &kh)?;
            for i in 0..l {
                let row = scores.row_mut(i);
                for s in row[..=i].iter_mut() {
                    *s *= scale;
                }
                row[i + 1..].fill(f64::NEG_INFINITY);
                softmax_in_place(row);
            }
            ctx.set_columns(h * dh, &matmul(&scores, &vh)?);
        }
        matmul(&ctx, &self.wo)
    }

    fn tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        vec![
            (format!("{prefix}.norm"), &self.norm),
            (format!("{prefix}.wq"), &self.wq),
            (format!("{prefix}.wk"), &self.wk),
            (format!("{prefix}.wv"), &self.wv),
            (format!("{prefix}.wo"), &self.wo),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.norm, &mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attn: Attention,
    pub ffn_norm: Matrix,
    pub ffn: ExpertParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    pub embedding: Matrix,
    pub positions: Matrix,
    pub blocks: Vec<Block>,
    pub final_attn: Attention,
    pub moe: MoeParams,
    pub final_norm: Matrix,
    pub head: Matrix,
    pub head_bias: Matrix,
}

/// Per-step losses. `total = task + α·balance`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub task_loss: f64,
    pub balance_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    x_attn: Matrix,
    y: Matrix,
    moe: MoeCache,
}

impl ForwardCache {
    pub fn moe(&self) -> &MoeCache {
        &self.moe
    }

    /// MoE output plus residual, before the final norm.
    pub fn block_output(&self) -> &Matrix {
        &self.y
    }

    /// Final-block attention output plus residual: the MoE input.
    pub fn moe_input(&self) -> &Matrix {
        &self.x_attn
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B·L × vocab`, batch-major.
    pub logits: Matrix,
    pub decisions: Vec<RoutingDecision>,
    pub stats: LoadBalanceStats,
    pub cache: ForwardCache,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor when comparing gradients; see [`relative_error`].
pub const GRAD_REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps near-zero gradients,
/// whose finite-difference estimate is dominated by round-off, from
/// producing meaningless ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelScores {
    pub label: SentimentLabel,
    /// Summed log-probabilities in class order (positive, negative, neutral).
    pub log_probs: [f64; 3],
}

/// Argmax over class scores; any exact tie for the maximum yields neutral.
pub fn pick_label(scores: [f64; 3]) -> SentimentLabel {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = (0..3).filter(|&i| scores[i] == best).collect();
    match winners.as_slice() {
        [only] => SentimentLabel::ALL[*only],
        _ => SentimentLabel::Neutral,
    }
}

impl Model {
    pub fn build(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let s = 1.0 / (d as f64).sqrt();
        let mut rng = SeededRng::new(cfg.init_seed);
        let embedding = Matrix::random_normal(cfg.vocab_size, d, s, &mut rng);
        let positions = Matrix::random_normal(cfg.max_seq_len, d, s, &mut rng);
        let blocks = (1..cfg.num_layers)
            .map(|_| Block {
                attn: Attention::init(d, &mut rng),
                ffn_norm: Matrix::filled(1, d, 1.0),
                ffn: ExpertParams::init(d, 4 * d, &mut rng),
            })
            .collect();
        let final_attn = Attention::init(d, &mut rng);
        let moe = MoeParams::init(&cfg.moe, &mut rng)?;
        let head = Matrix::random_normal(d, cfg.vocab_size, s, &mut rng);
        Ok(Model {
            embedding,
            positions,
            blocks,
            final_attn,
            moe,
            final_norm: Matrix::filled(1, d, 1.0),
            head,
            head_bias: Matrix::zeros(1, cfg.vocab_size),
            cfg,
        })
    }

    /// Reassembles a model from stored tensors, in [`Model::named_tensors`]
    /// order.
    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<Matrix>) -> Result<Model> {
        let mut model = Model::build(cfg)?;
        let slots = model.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (i, (slot, t)) in slots.into_iter().zip(tensors).enumerate() {
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "from_tensors",
                    format!("tensor {i}: stored {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Every tensor with its name and trainable flag.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix, bool)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding, false),
            ("positions".to_string(), &self.positions, false),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            out.extend(b.attn.tensors(&format!("{p}.attn")).into_iter().map(|(n, m)| (n, m, false)));
            out.push((format!("{p}.ffn_norm"), &b.ffn_norm, false));
            out.push((format!("{p}.ffn.gate"), &b.ffn.w_gate, false));
            out.push((format!("{p}.ffn.up"), &b.ffn.w_up, false));
            out.push((format!("{p}.ffn.down"), &b.ffn.w_down, false));
        }
        out.extend(self.final_attn.tensors("final.attn").into_iter().map(|(n, m)| (n, m, false)));
        out.extend(self.moe.tensors().into_iter().map(|(n, m)| (n, m, true)));
        out.push(("final_norm".to_string(), &self.final_norm, false));
        out.push(("head".to_string(), &self.head, false));
        out.push(("head_bias".to_string(), &self.head_bias, false));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding, &mut self.positions];
        for b in &mut self.blocks {
            out.extend(b.attn.tensors_mut());
            out.push(&mut b.ffn_norm);
            out.push(&mut b.ffn.w_gate);
            out.push(&mut b.ffn.w_up);
            out.push(&mut b.ffn.w_down);
        }
        out.extend(self.final_attn.tensors_mut());
        out.extend(self.moe.tensors_mut());
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }

    /// Everything up to the MoE input: `x_attn` for all `B·L` tokens,
    /// batch-major. Depends only on frozen tensors.
    pub fn trunk(&self, batch: &TokenBatch) -> Result<Matrix> {
        let l = batch.seq_len();
        if l > self.cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {l} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        let d = self.cfg.model_dim;
        let heads = self.cfg.num_heads;
        let mut out = Matrix::zeros(batch.num_tokens(), d);
        for (b, ids) in batch.ids().iter().enumerate() {
            let mut x = Matrix::zeros(l, d);
            for (i, &id) in ids.iter().enumerate() {
                if id as usize >= self.cfg.vocab_size {
                    return Err(Error::Input(format!("token id {id} outside vocabulary")));
                }
                for ((o, &e), &p) in x
                    .row_mut(i)
                    .iter_mut()
                    .zip(self.embedding.row(id as usize))
                    .zip(self.positions.row(i))
                {
                    *o = e + p;
                }
            }
            for block in &self.blocks {
                x = x.add(&block.attn.forward(&x, heads)?)?;
                let (ffn, _) = expert_forward(&rmsnorm(&x, &block.ffn_norm)?, &block.ffn)?;
                x = x.add(&ffn)?;
            }
            x = x.add(&self.final_attn.forward(&x, heads)?)?;
            for i in 0..l {
                out.row_mut(b * l + i).copy_from_slice(x.row(i));
            }
        }
        Ok(out)
    }

    /// MoE, residual, final norm and head on precomputed trunk output.
    pub fn tail(&self, x_attn: &Matrix, selection: Option<&[Vec<usize>]>) -> Result<ForwardOutput> {
        let moe = moe_forward_with_selection(x_attn, &self.moe, &self.cfg.moe, selection)?;
        let y = moe.y.add(x_attn)?;
        let normed = rmsnorm(&y, &self.final_norm)?;
        let mut logits = matmul(&normed, &self.head)?;
        let bias = self.head_bias.row(0);
        for t in 0..logits.rows() {
            for (v, b) in logits.row_mut(t).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(ForwardOutput {
            logits,
            decisions: moe.decisions,
            stats: moe.stats,
            cache: ForwardCache {
                x_attn: x_attn.clone(),
                y,
                moe: moe.cache,
            },
        })
    }

    pub fn forward(&self, batch: &TokenBatch) -> Result<ForwardOutput> {
        self.tail(&self.trunk(batch)?, None)
    }

    /// Task cross-entropy plus α times the balance loss.
    pub fn total_loss(logits: &Matrix, batch: &TokenBatch, stats: &LoadBalanceStats, alpha: f64) -> Result<f64> {
        let (targets, mask) = batch.targets();
        let (task, _) = cross_entropy(logits, &targets, &mask)?;
        Ok(task + alpha * stats.loss)
    }

    /// Loss record and MoE gradients for one forward over `x_attn`. The
    /// final norm and head only run on the scored rows.
    pub fn loss_and_grads(
        &self,
        x_attn: &Matrix,
        batch: &TokenBatch,
        alpha: f64,
        selection: Option<&[Vec<usize>]>,
    ) -> Result<(LossRecord, MoeParams, MoeCache)> {
        let moe = moe_forward_with_selection(x_attn, &self.moe, &self.cfg.moe, selection)?;
        let y = moe.y.add(x_attn)?;
        let (targets, mask) = batch.targets();
        let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyLossSupport);
        }
        let y_scored = y.gather_rows(&rows);
        let normed = rmsnorm(&y_scored, &self.final_norm)?;
        let mut logits = matmul(&normed, &self.head)?;
        let bias = self.head_bias.row(0);
        for t in 0..logits.rows() {
            for (v, b) in logits.row_mut(t).iter_mut().zip(bias) {
                *v += b;
            }
        }
        let scored_targets: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
        let (task, d_logits) = cross_entropy(&logits, &scored_targets, &vec![true; rows.len()])?;
        let record = LossRecord {
            task_loss: task,
            balance_loss: moe.stats.loss,
            total: task + alpha * moe.stats.loss,
        };
        let d_normed = matmul_nt(&d_logits, &self.head)?;
        let d_scored = rmsnorm_backward(&y_scored, &self.final_norm, &d_normed)?;
        let mut d_y = Matrix::zeros(y.rows(), y.cols());
        for (r, &i) in rows.iter().enumerate() {
            d_y.row_mut(i).copy_from_slice(d_scored.row(r));
        }
        let grads = moe_backward(&d_y, &moe.cache, &self.moe, alpha)?;
        Ok((record, grads, moe.cache))
    }

    /// Evaluates the loss record without computing gradients.
    pub fn evaluate(&self, batch: &TokenBatch, alpha: f64) -> Result<LossRecord> {
        let out = self.forward(batch)?;
        let (targets, mask) = batch.targets();
        let (task, _) = cross_entropy(&out.logits, &targets, &mask)?;
        Ok(LossRecord {
            task_loss: task,
            balance_loss: out.stats.loss,
            total: task + alpha * out.stats.loss,
        })
    }

    /// One gradient-descent step on the MoE parameters; returns the losses
    /// measured before the update.
    pub fn train_step(&mut self, batch: &TokenBatch, learning_rate: f64, alpha: f64) -> Result<LossRecord> {
        let x_attn = self.trunk(batch)?;
        self.train_step_on_features(&x_attn, batch, learning_rate, alpha)
    }

    /// [`Model::train_step`] with the trunk output supplied by the caller.
    pub fn train_step_on_features(
        &mut self,
        x_attn: &Matrix,
        batch: &TokenBatch,
        learning_rate: f64,
        alpha: f64,
    ) -> Result<LossRecord> {
        let (record, grads, _) = self.loss_and_grads(x_attn, batch, alpha, None)?;
        if !(record.total.is_finite() && record.task_loss.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: 0,
                task: record.task_loss,
                balance: record.balance_loss,
            });
        }
        self.moe.add_scaled(&grads, -learning_rate)?;
        Ok(record)
    }

    /// Compares analytic MoE gradients of the total loss with central
    /// differences of step `eps`, with every token's expert set held at the
    /// unperturbed top-k choice.
    pub fn gradient_check(&self, batch: &TokenBatch, alpha: f64, eps: f64) -> Result<GradCheckReport> {
        let x_attn = self.trunk(batch)?;
        let (_, grads, base) = self.loss_and_grads(&x_attn, batch, alpha, None)?;
        let selection = base.selection();
        let (targets, mask) = batch.targets();

        let mut probe = self.clone();
        let loss_at = |probe: &Model| -> Result<f64> {
            let out = probe.tail(&x_attn, Some(&selection))?;
            let (task, _) = cross_entropy(&out.logits, &targets, &mask)?;
            Ok(task + alpha * out.stats.loss)
        };

        let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_tensor: String::new(),
            worst_index: 0,
            checked: 0,
        };
        for (ti, name) in names.iter().enumerate() {
            let analytic = grads.tensors()[ti].1.as_slice().to_vec();
            for (idx, &a) in analytic.iter().enumerate() {
                let orig = probe.moe.tensors_mut()[ti].as_slice()[idx];
                probe.moe.tensors_mut()[ti].as_mut_slice()[idx] = orig + eps;
                let plus = loss_at(&probe)?;
                probe.moe.tensors_mut()[ti].as_mut_slice()[idx] = orig - eps;
                let minus = loss_at(&probe)?;
                probe.moe.tensors_mut()[ti].as_mut_slice()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let err = relative_error(a, numeric);
                report.checked += 1;
                if err > report.max_rel_error || report.worst_tensor.is_empty() {
                    report.max_rel_error = err;
                    report.worst_tensor = name.clone();
                    report.worst_index = idx;
                }
            }
        }
        Ok(report)
    }

    /// Scores each label word as a continuation of `prompt` (summed token
    /// log-probabilities of `" " + word`) and returns the best.
    pub fn score_labels(&self, prompt: &str) -> Result<LabelScores> {
        let prompt_ids: Vec<u32> = std::iter::once(BOS).chain(byte_ids(prompt)).collect();
        let mut seqs = Vec::with_capacity(3);
        let mut spans = Vec::with_capacity(3);
        for label in SentimentLabel::ALL {
            let answer = format!(" {}", label.word());
            let mut ids = prompt_ids.clone();
            ids.extend(byte_ids(&answer));
            ids.push(EOS);
            if ids.len() > self.cfg.max_seq_len {
                return Err(Error::Input(format!(
                    "prompt plus {label:?} needs {} tokens, max_seq_len is {}",
                    ids.len(),
                    self.cfg.max_seq_len
                )));
            }
            spans.push((prompt_ids.len(), prompt_ids.len() + answer.len()));
            let mask = vec![false; ids.len()];
            seqs.push((ids, mask));
        }
        let batch = TokenBatch::padded(seqs)?;
        let out = self.forward(&batch)?;
        let l = batch.seq_len();
        let mut log_probs = [0.0; 3];
        for (c, &(start, end)) in spans.iter().enumerate() {
            let ids = &batch.ids()[c];
            log_probs[c] = (start..end)
                .map(|j| log_softmax(out.logits.row(c * l + j - 1))[ids[j] as usize])
                .sum();
        }
        Ok(LabelScores {
            label: pick_label(log_probs),
            log_probs,
        })
    }
}
