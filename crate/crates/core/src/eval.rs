//! Sliding-window perplexity for causal models.
//!
//! Window `k` feeds tokens `[k·stride, k·stride + window)` (clipped to the
//! text) and predicts each next token. The first window scores every
//! prediction it makes; later windows score only targets past the previous
//! window's last target, i.e. their final `stride` predictions. With
//! `stride == window` the windows tile the text and every token after the
//! first is scored exactly once.

use rayon::prelude::*;

use crate::error::ModelError;
use crate::graph::log_softmax_at;
use crate::model::Model;
use crate::tensor::Scalar;

/// Default stride, in tokens.
pub const DEFAULT_STRIDE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    /// Index of the first input token.
    pub start: usize,
    /// Number of input tokens.
    pub len: usize,
    /// Position inside the window of the first scored prediction.
    pub first_scored: usize,
}

impl Window {
    pub fn scored(&self) -> usize {
        self.len - self.first_scored
    }
}

pub fn plan_windows(n_tokens: usize, window: usize, stride: usize) -> Vec<Window> {
    assert!(window >= 1 && stride >= 1);
    let mut out = Vec::new();
    if n_tokens < 2 {
        return out;
    }
    let last_target = n_tokens - 1;
    let mut start = 0;
    let mut prev_end = 0; // last target already scored
    while prev_end < last_target && start < last_target {
        let len = window.min(last_target - start);
        let end = start + len;
        let first_target = (prev_end + 1).max(start + 1);
        out.push(Window {
            start,
            len,
            first_scored: first_target - start - 1,
        });
        prev_end = end;
        start += stride;
    }
    out
}

/// Total NLL and number of scored tokens for one window.
fn window_nll<T: Scalar>(model: &Model<T>, text: &[usize], w: Window) -> Result<(f64, usize), ModelError> {
    let inputs = &text[w.start..w.start + w.len];
    let logits = model.logits(inputs, 1, w.len)?;
    let mut nll = 0.0;
    for j in w.first_scored..w.len {
        let target = text[w.start + j + 1];
        nll -= log_softmax_at(logits.row(j), target).as_f64();
    }
    Ok((nll, w.scored()))
}

/// `exp(mean NLL)` over the scored targets. Windows are evaluated in
/// parallel and reduced in window order.
pub fn evaluate_perplexity<T: Scalar>(
    model: &Model<T>,
    text: &[usize],
    stride: usize,
    window: usize,
) -> Result<f64, ModelError> {
    let cfg = model.config();
    if !cfg.arch.is_causal() {
        return Err(ModelError::Eval("perplexity needs a decoder-only model".into()));
    }
    if text.len() < 2 {
        return Err(ModelError::Eval(format!("text has {} tokens; need at least 2", text.len())));
    }
    if stride == 0 {
        return Err(ModelError::Eval("stride must be at least 1".into()));
    }
    if window == 0 || window > cfg.max_seq_len {
        return Err(ModelError::Eval(format!("window {window} outside 1..={}", cfg.max_seq_len)));
    }
    if let Some(&bad) = text.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::Eval(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let windows = plan_windows(text.len(), window, stride);
    let parts: Vec<(f64, usize)> = windows
        .par_iter()
        .map(|&w| window_nll(model, text, w))
        .collect::<Result<_, _>>()?;
    let (nll, count) = parts.iter().fold((0.0, 0usize), |(s, c), &(n, k)| (s + n, c + k));
    Ok((nll / count as f64).exp())
}
