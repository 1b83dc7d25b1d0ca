//! Teacher-forced fine-tuning of a transformer on framed cue→content
//! records: shuffled mini-batches of bias-corrected Adam updates for a
//! fixed epoch budget, bit-deterministic for a given seed.
//!
//! Per-record gradients within a batch may be computed on worker threads;
//! they are reduced in record order, so results are identical to the
//! sequential schedule.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{frame_record, Framed, MemoryRecord};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::tokenizer::{TokenizerError, Vocab};
use crate::transformer::{TransformerError, TransformerModel};

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    Tensor(TensorError),
    Transformer(TransformerError),
    Tokenizer(TokenizerError),
    BadConfig { msg: String },
    /// A framed record does not fit the model context; names the record.
    SequenceOverflow { record: String, len: usize, max: usize },
    NonFiniteLoss { epoch: usize, step: usize },
    NonFiniteGradient,
    VocabMismatch { model_vocab: usize, vocab: usize },
    EmptyCorpus,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Transformer(e) => write!(f, "{e}"),
            TrainError::Tokenizer(e) => write!(f, "{e}"),
            TrainError::BadConfig { msg } => write!(f, "{msg}"),
            TrainError::SequenceOverflow { record, len, max } => {
                write!(f, "record {record:?} frames to {len} tokens, max context is {max}")
            }
            TrainError::NonFiniteLoss { epoch, step } => {
                write!(f, "training aborted: non-finite loss at epoch {epoch}, step {step}")
            }
            TrainError::NonFiniteGradient => write!(f, "non-finite gradient"),
            TrainError::VocabMismatch { model_vocab, vocab } => {
                write!(f, "model vocab size {model_vocab} does not match vocabulary size {vocab}")
            }
            TrainError::EmptyCorpus => write!(f, "no records to train on"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<TransformerError> for TrainError {
    fn from(e: TransformerError) -> Self {
        TrainError::Transformer(e)
    }
}

impl From<TokenizerError> for TrainError {
    fn from(e: TokenizerError) -> Self {
        TrainError::Tokenizer(e)
    }
}

/// Which target positions contribute to the loss.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Content tokens and EOS only; cue tokens are supplied at evaluation
    /// time, so capacity is not spent memorizing them.
    ContentOnly,
    FullSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub mask_mode: MaskMode,
    /// Epoch interval for interim checkpoint files (0 = final only).
    #[serde(default)]
    pub checkpoint_cadence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            step_size: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            mask_mode: MaskMode::ContentOnly,
            checkpoint_cadence: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig { msg: "epochs must be at least 1".to_string() });
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig { msg: "batch size must be at least 1".to_string() });
        }
        if !(self.step_size > 0.0) {
            return Err(TrainError::BadConfig {
                msg: format!("step size must be positive, got {}", self.step_size),
            });
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::BadConfig {
                msg: format!("clip norm must be positive, got {}", self.clip_norm),
            });
        }
        Ok(())
    }
}

/// Per-epoch record of the run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
    pub checkpoint: Option<String>,
}

impl TrainTrace {
    /// CSV with columns epoch, mean_loss, seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,seconds\n");
        for (i, (loss, secs)) in self
            .epoch_losses
            .iter()
            .zip(self.epoch_seconds.iter())
            .enumerate()
        {
            out.push_str(&format!("{},{:.17e},{:.3}\n", i + 1, loss, secs));
        }
        out
    }
}

/// First/second-moment buffers for Adam, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &[&mut Tensor]) -> AdamState {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. The global gradient norm is clipped to
/// `config.clip_norm` before the update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::BadConfig {
            msg: format!(
                "adam_step: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    let mut norm_sq = 0.0;
    for g in grads {
        for &v in g {
            if !v.is_finite() {
                return Err(TrainError::NonFiniteGradient);
            }
            norm_sq += v * v;
        }
    }
    let norm = norm_sq.sqrt();
    let clip_scale = if norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..grad.len() {
            let g = grad[i] * clip_scale;
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.data[i] -= config.step_size * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Loss mask for a framed record: target positions selected by the mode.
/// Input row `i` predicts token `i + 1`.
pub fn loss_mask(framed: &Framed, mode: MaskMode) -> Vec<bool> {
    let rows = framed.tokens.len() - 1;
    match mode {
        MaskMode::FullSequence => vec![true; rows],
        MaskMode::ContentOnly => (0..rows).map(|i| i >= framed.sep_index).collect(),
    }
}

/// Forward + backward for one record; returns the mean loss over unmasked
/// positions and per-parameter gradients in declared order.
fn record_grads(
    model: &TransformerModel,
    framed: &Framed,
    mode: MaskMode,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let inputs = &framed.tokens[..framed.tokens.len() - 1];
    let targets = &framed.tokens[1..];
    let mask = loss_mask(framed, mode);
    let mut tape = Tape::new();
    let pass = model.forward_on_tape(&mut tape, inputs, true)?;
    let loss = tape.cross_entropy(pass.logits, targets, &mask)?;
    let loss_value = tape.data(loss)[0];
    tape.backward(loss)?;
    let grads = pass
        .param_leaves
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    Ok((loss_value, grads))
}

/// Fine-tunes `model` in place. Deterministic given (config, corpus, seed).
/// `on_epoch` is called after each epoch with (epoch index, mean loss, model).
pub fn train(
    model: &mut TransformerModel,
    records: &[MemoryRecord],
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<TrainTrace, TrainError> {
    train_with_callback(model, records, vocab, config, |_, _, _| Ok(()))
}

pub fn train_with_callback(
    model: &mut TransformerModel,
    records: &[MemoryRecord],
    vocab: &Vocab,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &TransformerModel) -> Result<(), TrainError>,
) -> Result<TrainTrace, TrainError> {
    config.validate()?;
    if records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if model.config.vocab_size != vocab.size() {
        return Err(TrainError::VocabMismatch {
            model_vocab: model.config.vocab_size,
            vocab: vocab.size(),
        });
    }

    let mut framed = Vec::with_capacity(records.len());
    for record in records {
        let f = frame_record(vocab, record)?;
        if f.tokens.len() > model.config.max_seq_len {
            return Err(TrainError::SequenceOverflow {
                record: record.cue_text(),
                len: f.tokens.len(),
                max: model.config.max_seq_len,
            });
        }
        framed.push(f);
    }

    let mut state = AdamState::for_params(&model.params_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = TrainTrace {
        epoch_losses: Vec::with_capacity(config.epochs),
        epoch_seconds: Vec::with_capacity(config.epochs),
        total_seconds: 0.0,
        checkpoint: None,
    };
    let started = Instant::now();

    let mut order: Vec<usize> = (0..framed.len()).collect();
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<Vec<f64>>), TrainError>> = batch
                .par_iter()
                .map(|&idx| record_grads(model, &framed[idx], config.mask_mode))
                .collect();

            let scale = 1.0 / batch.len() as f64;
            let mut batch_grads: Option<Vec<Vec<f64>>> = None;
            for result in results {
                let (loss, grads) = result.map_err(|e| match e {
                    TrainError::Tensor(TensorError::NonFinite { .. }) => {
                        TrainError::NonFiniteLoss { epoch: epoch + 1, step: step + 1 }
                    }
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch: epoch + 1, step: step + 1 });
                }
                loss_sum += loss;
                match batch_grads.as_mut() {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads.iter()) {
                            for (x, y) in a.iter_mut().zip(g.iter()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = batch_grads.expect("non-empty batch");
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            adam_step(&mut model.params_mut(), &grads, &mut state, config)?;
        }
        let mean_loss = loss_sum / framed.len() as f64;
        trace.epoch_losses.push(mean_loss);
        trace.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
        on_epoch(epoch + 1, mean_loss, model)?;
    }
    trace.total_seconds = started.elapsed().as_secs_f64();
    Ok(trace)
}
