//! Training loop, objectives and data sources.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ModelError, TensorError};
use crate::model::Model;
use crate::optim::{adamw_step, AdamState, AdamWConfig, Schedule};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Objective {
    /// Masked language modelling: corrupt some positions, predict them.
    Mlm,
    /// Causal language modelling: predict every next token.
    Clm,
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mlm" => Ok(Objective::Mlm),
            "clm" => Ok(Objective::Clm),
            other => Err(format!("unknown objective {other:?}; expected mlm or clm")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub objective: Objective,
    pub mlm_mask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 100,
            schedule: Schedule::Linear,
            objective: Objective::Clm,
            mlm_mask_prob: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            schedule: self.schedule,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.optimizer().validate().map_err(ModelError::Config)?;
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_prob) {
            return Err(ModelError::Config(format!("mlm_mask_prob must lie in [0, 1], got {}", self.mlm_mask_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    /// `(step, loss)` for every update, 1-based.
    pub loss_curve: Vec<(usize, f64)>,
    /// Mean loss over the last tenth of the run (at least one step, at most
    /// 50); NaN when no step was taken.
    pub final_loss: f64,
    pub tokens_seen: u64,
    pub wall_time: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_curve.first().map(|&(_, l)| l)
    }
}

/// One training sequence. `score[t]` says whether token `t` may serve as a
/// target (next-token target for CLM, maskable position for MLM).
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub score: Vec<bool>,
}

pub trait BatchSource {
    /// Length of every sequence this source yields.
    fn sequence_len(&self) -> usize;
    fn next_sequence(&mut self) -> Sequence;
}

/// Random prefix followed by an exact copy of itself. Tokens are drawn
/// from `0..vocab-1`; id `vocab-1` is reserved for the MLM mask. Only the
/// second copy is scored.
#[derive(Clone, Debug)]
pub struct CopyTask {
    pub vocab: usize,
    pub prefix_len: usize,
    rng: ChaCha8Rng,
}

impl CopyTask {
    pub fn new(vocab: usize, prefix_len: usize, seed: u64) -> Self {
        assert!(vocab >= 3, "copy task needs at least two symbols plus the mask");
        assert!(prefix_len >= 1);
        Self {
            vocab,
            prefix_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mask_token(&self) -> usize {
        self.vocab - 1
    }
}

impl BatchSource for CopyTask {
    fn sequence_len(&self) -> usize {
        2 * self.prefix_len
    }

    fn next_sequence(&mut self) -> Sequence {
        let prefix: Vec<usize> = (0..self.prefix_len).map(|_| self.rng.gen_range(0..self.vocab - 1)).collect();
        let mut tokens = prefix.clone();
        tokens.extend_from_slice(&prefix);
        let score = (0..tokens.len()).map(|t| t >= self.prefix_len).collect();
        Sequence { tokens, score }
    }
}

/// Consecutive windows over a token stream, wrapping at the end.
#[derive(Clone, Debug)]
pub struct StreamSource {
    tokens: Vec<usize>,
    len: usize,
    cursor: usize,
}

impl StreamSource {
    pub fn new(tokens: Vec<usize>, len: usize) -> Result<Self, ModelError> {
        if tokens.is_empty() || len == 0 {
            return Err(ModelError::Config("stream source needs tokens and a positive window".into()));
        }
        Ok(Self { tokens, len, cursor: 0 })
    }
}

impl BatchSource for StreamSource {
    fn sequence_len(&self) -> usize {
        self.len
    }

    fn next_sequence(&mut self) -> Sequence {
        let n = self.tokens.len();
        let tokens: Vec<usize> = (0..self.len).map(|i| self.tokens[(self.cursor + i) % n]).collect();
        self.cursor = (self.cursor + self.len) % n;
        Sequence {
            score: vec![true; tokens.len()],
            tokens,
        }
    }
}

/// Model inputs and targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
    pub seq: usize,
}

/// Next-token batch: inputs drop the last token, targets drop the first.
pub fn clm_batch(seqs: &[Sequence]) -> Batch {
    let seq = seqs[0].tokens.len() - 1;
    let mut inputs = Vec::with_capacity(seqs.len() * seq);
    let mut targets = Vec::with_capacity(seqs.len() * seq);
    for s in seqs {
        inputs.extend_from_slice(&s.tokens[..seq]);
        targets.extend((1..=seq).map(|t| s.score[t].then_some(s.tokens[t])));
    }
    Batch {
        inputs,
        targets,
        batch: seqs.len(),
        seq,
    }
}

/// Masked batch: each scorable position is selected with `mask_prob`;
/// selected positions become `mask_token` (80%), a random token (10%) or
/// stay unchanged (10%), and only they are scored. At least one position
/// per batch is selected.
pub fn mlm_batch<R: Rng>(seqs: &[Sequence], mask_prob: f64, mask_token: usize, vocab: usize, rng: &mut R) -> Batch {
    let seq = seqs[0].tokens.len();
    let mut inputs = Vec::with_capacity(seqs.len() * seq);
    let mut targets = Vec::with_capacity(seqs.len() * seq);
    for s in seqs {
        for (t, &tok) in s.tokens.iter().enumerate() {
            if s.score[t] && rng.gen::<f64>() < mask_prob {
                let r: f64 = rng.gen();
                inputs.push(if r < 0.8 {
                    mask_token
                } else if r < 0.9 {
                    rng.gen_range(0..vocab)
                } else {
                    tok
                });
                targets.push(Some(tok));
            } else {
                inputs.push(tok);
                targets.push(None);
            }
        }
    }
    if targets.iter().all(Option::is_none) {
        if let Some(i) = seqs
            .iter()
            .enumerate()
            .flat_map(|(b, s)| s.score.iter().enumerate().map(move |(t, &ok)| (b * seq + t, ok)))
            .find(|&(_, ok)| ok)
            .map(|(i, _)| i)
        {
            targets[i] = Some(inputs[i]);
            inputs[i] = mask_token;
        }
    }
    Batch {
        inputs,
        targets,
        batch: seqs.len(),
        seq,
    }
}

/// Draws one batch in the shape the objective needs.
pub fn draw_batch<S: BatchSource + ?Sized, R: Rng>(
    source: &mut S,
    batch_size: usize,
    objective: Objective,
    mask_prob: f64,
    vocab: usize,
    rng: &mut R,
) -> Batch {
    let seqs: Vec<Sequence> = (0..batch_size).map(|_| source.next_sequence()).collect();
    match objective {
        Objective::Clm => clm_batch(&seqs),
        Objective::Mlm => mlm_batch(&seqs, mask_prob, vocab - 1, vocab, rng),
    }
}

fn grad_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Runs `tcfg.steps` AdamW updates on batches from `source`.
pub fn train<T: Scalar, S: BatchSource + ?Sized>(
    model: &mut Model<T>,
    source: &mut S,
    tcfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    tcfg.validate()?;
    let cfg = model.config().clone();
    let seq_needed = match tcfg.objective {
        Objective::Clm => source.sequence_len().saturating_sub(1),
        Objective::Mlm => source.sequence_len(),
    };
    if seq_needed == 0 || seq_needed > cfg.max_seq_len {
        return Err(ModelError::Config(format!(
            "source sequences give model inputs of length {seq_needed}, model accepts 1..={}",
            cfg.max_seq_len
        )));
    }
    if tcfg.objective == Objective::Clm && !cfg.arch.is_causal() {
        return Err(ModelError::Config("causal LM objective needs a decoder-only model".into()));
    }
    let opt = tcfg.optimizer();
    let mut state = AdamState::zeros_like(model.named_params().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6c_6d5f_6d61_736b);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6472_6f70_6f75_7421);
    let start = Instant::now();
    let mut curve = Vec::with_capacity(tcfg.steps);
    let mut tokens_seen = 0u64;
    let mut last_norm = 0.0;

    for step in 1..=tcfg.steps {
        let b = draw_batch(source, tcfg.batch_size, tcfg.objective, tcfg.mlm_mask_prob, cfg.vocab_size, &mut rng);
        let drop = (cfg.dropout > 0.0).then_some(&mut dropout_rng);
        let result = model.loss_and_grads(&b.inputs, &b.targets, b.batch, b.seq, drop);
        let (loss, grads) = match result {
            Ok(r) => r,
            Err(ModelError::Tensor(TensorError::NumericInput { .. })) => {
                return Err(ModelError::NonFiniteLoss {
                    step,
                    lr: opt.lr_at(step),
                    grad_norm: last_norm,
                })
            }
            Err(e) => return Err(e),
        };
        last_norm = grad_norm(&grads);
        if !loss.is_finite() || !last_norm.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step,
                lr: opt.lr_at(step),
                grad_norm: last_norm,
            });
        }
        adamw_step(&mut model.params_mut(), &grads, &mut state, &opt, step)?;
        curve.push((step, loss));
        tokens_seen += (b.batch * b.seq) as u64;
    }

    let tail = (curve.len() / 10).clamp(1, 50);
    let final_loss = if curve.is_empty() {
        f64::NAN
    } else {
        curve[curve.len() - tail..].iter().map(|&(_, l)| l).sum::<f64>() / tail as f64
    };
    Ok(TrainReport {
        loss_curve: curve,
        final_loss,
        tokens_seen,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
