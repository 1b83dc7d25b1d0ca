//! Decoder-only transformer built from pre-norm residual blocks, with
//! residual-stream decomposition and attention-map extraction.
//!
//! Pre-norm blocks keep the residual stream a pure sum: the hidden state
//! before the final norm equals the embedding+position base plus one
//! additive increment per attention/FFN sublayer. `decompose_residual`
//! measures those increments directly; `attention_maps` exposes the
//! input-dependent mixing weights.

mod checkpoint;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CheckpointError};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Activation, Tape, Tensor, TensorError, TensorId};

/// Layer-norm variance epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum TransformerError {
    Tensor(TensorError),
    BadConfig { msg: String },
    SequenceTooLong { len: usize, max: usize },
    TokenOutOfRange { token: usize, vocab: usize },
    EmptyPrompt,
    ContextOverflow { needed: usize, max: usize },
}

impl fmt::Display for TransformerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformerError::Tensor(e) => write!(f, "{e}"),
            TransformerError::BadConfig { msg } => write!(f, "{msg}"),
            TransformerError::SequenceTooLong { len, max } => {
                write!(f, "sequence of length {len} exceeds max context {max}")
            }
            TransformerError::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} out of range for vocab size {vocab}")
            }
            TransformerError::EmptyPrompt => write!(f, "prompt must be non-empty"),
            TransformerError::ContextOverflow { needed, max } => {
                write!(f, "prompt plus generation budget needs {needed} positions, max is {max}")
            }
        }
    }
}

impl std::error::Error for TransformerError {}

impl From<TensorError> for TransformerError {
    fn from(e: TensorError) -> Self {
        TransformerError::Tensor(e)
    }
}

/// Positional encoding kind. Only learned absolute tables are supported.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    pub max_seq_len: usize,
    #[serde(default = "default_pos_encoding")]
    pub pos_encoding: PosEncoding,
    pub seed: u64,
}

fn default_pos_encoding() -> PosEncoding {
    PosEncoding::LearnedAbsolute
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), TransformerError> {
        if self.vocab_size == 0 || self.model_dim == 0 || self.heads == 0 {
            return Err(TransformerError::BadConfig {
                msg: "vocab_size, model_dim and heads must be positive".to_string(),
            });
        }
        if self.model_dim % self.heads != 0 {
            return Err(TransformerError::BadConfig {
                msg: format!(
                    "model_dim {} must be divisible by heads {}",
                    self.model_dim, self.heads
                ),
            });
        }
        if self.max_seq_len < 2 {
            return Err(TransformerError::BadConfig {
                msg: format!("max_seq_len must be at least 2, got {}", self.max_seq_len),
            });
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.model_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// One pre-norm block: attention sublayer then FFN sublayer, each adding
/// its output to the residual stream.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    /// Token embedding table, also used (transposed) as the output head.
    pub embedding: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<Block>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

struct ParamInit {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl ParamInit {
    fn new(seed: u64) -> Self {
        ParamInit { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Box-Muller standard normal, scaled.
    fn normal(&mut self, std: f64) -> f64 {
        if let Some(v) = self.spare.take() {
            return v * std;
        }
        let u1: f64 = 1.0 - self.rng.gen::<f64>(); // (0, 1]
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos() * std
    }

    fn weight(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal(0.02)).collect();
        Tensor { shape, data, requires_grad: true, grad: None }
    }

    fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::zeros(shape).with_grad()
    }

    fn ones(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![1.0; n], requires_grad: true, grad: None }
    }
}

impl TransformerModel {
    /// Builds a freshly initialized model: weights seeded normal(0, 0.02),
    /// biases and norm offsets zero, norm gains one.
    pub fn init(config: TransformerConfig) -> Result<TransformerModel, TransformerError> {
        config.validate()?;
        let d = config.model_dim;
        let f = config.ffn_width();
        let mut init = ParamInit::new(config.seed);
        let embedding = init.weight(vec![config.vocab_size, d]);
        let positional = init.weight(vec![config.max_seq_len, d]);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_gain: init.ones(vec![d]),
                ln1_bias: init.zeros(vec![d]),
                wq: init.weight(vec![d, d]),
                bq: init.zeros(vec![d]),
                wk: init.weight(vec![d, d]),
                bk: init.zeros(vec![d]),
                wv: init.weight(vec![d, d]),
                bv: init.zeros(vec![d]),
                wo: init.weight(vec![d, d]),
                bo: init.zeros(vec![d]),
                ln2_gain: init.ones(vec![d]),
                ln2_bias: init.zeros(vec![d]),
                w1: init.weight(vec![d, f]),
                b1: init.zeros(vec![f]),
                w2: init.weight(vec![f, d]),
                b2: init.zeros(vec![d]),
            })
            .collect();
        Ok(TransformerModel {
            config,
            embedding,
            positional,
            blocks,
            final_gain: init.ones(vec![d]),
            final_bias: init.zeros(vec![d]),
        })
    }

    /// Parameters in declared order, paired with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".to_string(), &self.embedding),
            ("positional".to_string(), &self.positional),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding, &mut self.positional];
        for b in self.blocks.iter_mut() {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn validate_tokens(&self, tokens: &[usize]) -> Result<(), TransformerError> {
        if tokens.len() > self.config.max_seq_len {
            return Err(TransformerError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(TransformerError::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    /// Embedding + position contribution, `[T, d]`.
    pub base: TensorId,
    /// Additive residual increments in order: attention then FFN per layer.
    pub sublayers: Vec<TensorId>,
    /// Residual stream before the final norm, `[T, d]`.
    pub hidden: TensorId,
    /// Next-token logits, `[T, V]`.
    pub logits: TensorId,
    /// Post-softmax attention maps, `[layer][head]` each `[T, T]`.
    pub attention: Vec<Vec<TensorId>>,
    /// Leaf ids of all parameters in declared order (for gradient reads).
    pub param_leaves: Vec<TensorId>,
}

impl TransformerModel {
    /// Number of parameter tensors in declared order.
    pub fn param_count(&self) -> usize {
        4 + 16 * self.blocks.len()
    }

    /// Runs the model on `tokens`, recording every intermediate on `tape`.
    /// With `tracked`, parameter leaves require gradients.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        tracked: bool,
    ) -> Result<ForwardPass, TransformerError> {
        let leaves: Vec<TensorId> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.requires_grad = tracked;
                tape.leaf(&t)
            })
            .collect();
        self.forward_with_leaves(tape, &leaves, tokens)
    }

    /// Like [`TransformerModel::forward_on_tape`], but consumes parameter
    /// leaves already recorded on the tape (declared order). The model
    /// supplies only shapes and configuration; values come from the leaves.
    pub fn forward_with_leaves(
        &self,
        tape: &mut Tape,
        params: &[TensorId],
        tokens: &[usize],
    ) -> Result<ForwardPass, TransformerError> {
        if params.len() != self.param_count() {
            return Err(TransformerError::BadConfig {
                msg: format!(
                    "expected {} parameter leaves, got {}",
                    self.param_count(),
                    params.len()
                ),
            });
        }
        if tokens.is_empty() {
            return Err(TransformerError::EmptyPrompt);
        }
        self.validate_tokens(tokens)?;
        let t = tokens.len();
        let heads = self.config.heads;
        let dh = self.config.head_dim();

        let param_leaves = params.to_vec();
        let mut cursor = params.iter().copied();
        let mut leaf = move || cursor.next().expect("length checked");

        let embedding = leaf();
        let positional = leaf();

        let tok = tape.embed_lookup(embedding, tokens)?;
        let pos = tape.slice_rows(positional, 0, t)?;
        let base = tape.add(tok, pos)?;

        let mut x = base;
        let mut sublayers = Vec::with_capacity(2 * self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for _ in 0..self.blocks.len() {
            let ln1_g = leaf();
            let ln1_b = leaf();
            let wq = leaf();
            let bq = leaf();
            let wk = leaf();
            let bk = leaf();
            let wv = leaf();
            let bv = leaf();
            let wo = leaf();
            let bo = leaf();

            let normed = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
            let q = tape.matmul(normed, wq)?;
            let q = tape.add_row(q, bq)?;
            let k = tape.matmul(normed, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul(normed, wv)?;
            let v = tape.add_row(v, bv)?;

            let mut head_maps = Vec::with_capacity(heads);
            let mut contexts = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
                let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
                let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let map = tape.causal_softmax(scaled)?;
                head_maps.push(map);
                contexts.push(tape.matmul(map, vh)?);
            }
            attention.push(head_maps);
            let ctx = tape.concat_cols(&contexts)?;
            let proj = tape.matmul(ctx, wo)?;
            let attn_out = tape.add_row(proj, bo)?;
            sublayers.push(attn_out);
            x = tape.add(x, attn_out)?;

            let ln2_g = leaf();
            let ln2_b = leaf();
            let w1 = leaf();
            let b1 = leaf();
            let w2 = leaf();
            let b2 = leaf();

            let normed2 = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
            let ff = tape.matmul(normed2, w1)?;
            let ff = tape.add_row(ff, b1)?;
            let act = tape.activation(ff, Activation::Gelu)?;
            let proj = tape.matmul(act, w2)?;
            let ffn_out = tape.add_row(proj, b2)?;
            sublayers.push(ffn_out);
            x = tape.add(x, ffn_out)?;
        }

        let final_g = leaf();
        let final_b = leaf();
        let hidden = x;
        let final_norm = tape.layer_norm(hidden, final_g, final_b, LN_EPS)?;
        // Output head tied to the embedding table.
        let head = tape.transpose(embedding)?;
        let logits = tape.matmul(final_norm, head)?;

        Ok(ForwardPass {
            base,
            sublayers,
            hidden,
            logits,
            attention,
            param_leaves,
        })
    }

    /// Causal next-token logits for a prompt, `[T, V]`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor, TransformerError> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, tokens, false)?;
        Ok(tape.value(pass.logits))
    }

    /// Appends argmax tokens until `stop` is produced or `max_new` tokens
    /// have been added. Ties break toward the lowest token id. The returned
    /// sequence includes the prompt (and the stop token if one was emitted).
    pub fn greedy_decode(
        &self,
        prompt: &[usize],
        max_new: usize,
        stop: usize,
    ) -> Result<Vec<usize>, TransformerError> {
        if prompt.is_empty() {
            return Err(TransformerError::EmptyPrompt);
        }
        if prompt.len() + max_new > self.config.max_seq_len {
            return Err(TransformerError::ContextOverflow {
                needed: prompt.len() + max_new,
                max: self.config.max_seq_len,
            });
        }
        let mut tokens = prompt.to_vec();
        for _ in 0..max_new {
            let logits = self.forward(&tokens)?;
            let v = self.config.vocab_size;
            let last = &logits.data[(tokens.len() - 1) * v..tokens.len() * v];
            let next = argmax(last);
            tokens.push(next);
            if next == stop {
                break;
            }
        }
        Ok(tokens)
    }
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Additive decomposition of the residual stream for one prompt.
#[derive(Clone, Debug)]
pub struct DecompositionReport {
    /// Embedding + position term, `[T, d]`.
    pub base: Tensor,
    /// Per-sublayer increments in forward order (attention, FFN per layer).
    pub contributions: Vec<Tensor>,
    /// `‖base + Σ contributions − hidden‖ / ‖hidden‖`.
    pub reconstruction_error: f64,
    /// Pre-final-norm hidden state, `[T, d]`.
    pub hidden: Tensor,
}

impl DecompositionReport {
    /// Frobenius norm of each contribution, in forward order.
    pub fn contribution_norms(&self) -> Vec<f64> {
        self.contributions
            .iter()
            .map(|c| c.data.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Measures each sublayer's additive increment to the residual stream and
/// checks that base + increments reconstructs the pre-head hidden state.
pub fn decompose_residual(
    model: &TransformerModel,
    tokens: &[usize],
) -> Result<DecompositionReport, TransformerError> {
    let mut tape = Tape::new();
    let pass = model.forward_on_tape(&mut tape, tokens, false)?;
    let base = tape.value(pass.base);
    let contributions: Vec<Tensor> = pass.sublayers.iter().map(|&id| tape.value(id)).collect();
    let hidden = tape.value(pass.hidden);

    let mut sum = base.data.clone();
    for c in &contributions {
        for (s, v) in sum.iter_mut().zip(c.data.iter()) {
            *s += v;
        }
    }
    let mut err_sq = 0.0;
    let mut norm_sq = 0.0;
    for (s, h) in sum.iter().zip(hidden.data.iter()) {
        err_sq += (s - h) * (s - h);
        norm_sq += h * h;
    }
    let reconstruction_error = if norm_sq > 0.0 {
        (err_sq / norm_sq).sqrt()
    } else {
        err_sq.sqrt()
    };

    Ok(DecompositionReport { base, contributions, reconstruction_error, hidden })
}

/// Post-softmax attention matrices, `[layer][head]`, each `T x T` with rows
/// forming distributions over positions `<=` the row index.
pub fn attention_maps(
    model: &TransformerModel,
    tokens: &[usize],
) -> Result<Vec<Vec<Tensor>>, TransformerError> {
    let mut tape = Tape::new();
    let pass = model.forward_on_tape(&mut tape, tokens, false)?;
    Ok(pass
        .attention
        .iter()
        .map(|layer| layer.iter().map(|&id| tape.value(id)).collect())
        .collect())
}
