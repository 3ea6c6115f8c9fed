//! Tiny pre-norm transformers built around one attention variant.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{self, AttentionLayerParams, BoundAttention, init_std};
use crate::error::{ModelError, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use crate::variant::AttentionVariant;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Arch {
    EncoderOnly,
    DecoderOnly,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::EncoderOnly => "encoder_only",
            Arch::DecoderOnly => "decoder_only",
        }
    }

    pub fn is_causal(self) -> bool {
        self == Arch::DecoderOnly
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "encoder_only" | "encoder" => Ok(Arch::EncoderOnly),
            "decoder_only" | "decoder" => Ok(Arch::DecoderOnly),
            other => Err(format!("unknown architecture {other:?}; expected encoder_only or decoder_only")),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub variant: AttentionVariant,
    /// Dropout on sublayer outputs during training; 0 disables it.
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// A config with `ffn_dim = 4·d_m` and no dropout.
    pub fn new(
        arch: Arch,
        variant: AttentionVariant,
        n_layers: usize,
        n_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
        seed: u64,
    ) -> Self {
        Self {
            arch,
            n_layers,
            n_heads,
            head_dim,
            ffn_dim: 4 * n_heads * head_dim,
            vocab_size,
            max_seq_len,
            variant,
            dropout: 0.0,
            seed,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.n_layers < 1 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_heads < 1 || self.head_dim < 1 {
            return fail(format!("heads ({}) and head_dim ({}) must be positive", self.n_heads, self.head_dim));
        }
        if self.ffn_dim < 1 {
            return fail("ffn_dim must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.max_seq_len < 1 {
            return fail("max_seq_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv_lines(&self) -> Vec<String> {
        vec![
            format!("arch={}", self.arch),
            format!("n_layers={}", self.n_layers),
            format!("n_heads={}", self.n_heads),
            format!("head_dim={}", self.head_dim),
            format!("model_dim={}", self.model_dim()),
            format!("ffn_dim={}", self.ffn_dim),
            format!("vocab_size={}", self.vocab_size),
            format!("max_seq_len={}", self.max_seq_len),
            format!("variant={}", self.variant.tag()),
            format!("dropout={}", self.dropout),
            format!("seed={}", self.seed),
        ]
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::new(Arch::DecoderOnly, AttentionVariant::Mha, 0, 0, 0, 0, 0, 0);
        let mut seen = std::collections::HashSet::new();
        let mut model_dim = None;
        for (k, v) in pairs {
            let bad = |e: String| ModelError::Format(format!("config field {k}: {e}"));
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(e.to_string()));
            match k {
                "arch" => cfg.arch = v.parse().map_err(bad)?,
                "n_layers" => cfg.n_layers = int(v)?,
                "n_heads" => cfg.n_heads = int(v)?,
                "head_dim" => cfg.head_dim = int(v)?,
                "model_dim" => model_dim = Some(int(v)?),
                "ffn_dim" => cfg.ffn_dim = int(v)?,
                "vocab_size" => cfg.vocab_size = int(v)?,
                "max_seq_len" => cfg.max_seq_len = int(v)?,
                "variant" => cfg.variant = v.parse().map_err(|e: crate::variant::UnknownVariant| bad(e.to_string()))?,
                "dropout" => cfg.dropout = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                "seed" => cfg.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                _ => continue,
            }
            seen.insert(k.to_string());
        }
        for required in ["arch", "n_layers", "n_heads", "head_dim", "ffn_dim", "vocab_size", "max_seq_len", "variant"] {
            if !seen.contains(required) {
                return Err(ModelError::Format(format!("config field {required} missing")));
            }
        }
        if let Some(dm) = model_dim {
            if dm != cfg.model_dim() {
                return Err(ModelError::Config(format!(
                    "model_dim {dm} != n_heads·head_dim {}",
                    cfg.model_dim()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One transformer block: pre-norm attention and feed-forward sublayers.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub attn: AttentionLayerParams<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ffn_in: Tensor<T>,
    pub ffn_in_bias: Tensor<T>,
    pub ffn_out: Tensor<T>,
    pub ffn_out_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

/// Token and position embeddings, `N` blocks, final norm, and an output
/// head tied to the token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
}

/// Model tensors recorded in a graph, in [`Model::named_params`] order.
pub struct BoundModel {
    pub vars: Vec<Var>,
    attn: Vec<BoundAttention>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; deterministic in `cfg.seed`.
    pub fn build(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d_m = cfg.model_dim();
        let std = init_std(d_m);
        let tok_emb = Tensor::randn(vec![cfg.vocab_size, d_m], std, &mut rng);
        let pos_emb = Tensor::randn(vec![cfg.max_seq_len, d_m], std, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let attn = AttentionLayerParams::init_with_rng(cfg.variant, cfg.n_heads, cfg.head_dim, &mut rng)?;
            blocks.push(Block {
                attn,
                ln1_gain: Tensor::full(vec![d_m], T::one()),
                ln1_bias: Tensor::zeros(vec![d_m]),
                ffn_in: Tensor::randn(vec![d_m, cfg.ffn_dim], std, &mut rng),
                ffn_in_bias: Tensor::zeros(vec![cfg.ffn_dim]),
                ffn_out: Tensor::randn(vec![cfg.ffn_dim, d_m], init_std(cfg.ffn_dim), &mut rng),
                ffn_out_bias: Tensor::zeros(vec![d_m]),
                ln2_gain: Tensor::full(vec![d_m], T::one()),
                ln2_bias: Tensor::zeros(vec![d_m]),
            });
        }
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::full(vec![d_m], T::one()),
            lnf_bias: Tensor::zeros(vec![d_m]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Every learnable tensor with a stable dotted name.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (role, t) in b.attn.iter() {
                out.push((format!("blocks.{i}.attn.{}", role.name()), t));
            }
            for (name, t) in [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("ffn_in", &b.ffn_in),
                ("ffn_in_bias", &b.ffn_in_bias),
                ("ffn_out", &b.ffn_out),
                ("ffn_out_bias", &b.ffn_out_bias),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
            ] {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out
    }

    /// Mutable tensors in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.attn.iter_mut().map(|(_, t)| t));
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(&mut b.ffn_in);
            out.push(&mut b.ffn_in_bias);
            out.push(&mut b.ffn_out);
            out.push(&mut b.ffn_out_bias);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Learnable scalars inside attention Q/K/V (output projection excluded).
    pub fn attention_qkv_params(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.attn.iter())
            .filter(|(role, _)| *role != crate::attention::ParamRole::Output)
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                attn: b.attn.cast(),
                ln1_gain: b.ln1_gain.cast(),
                ln1_bias: b.ln1_bias.cast(),
                ffn_in: b.ffn_in.cast(),
                ffn_in_bias: b.ffn_in_bias.cast(),
                ffn_out: b.ffn_out.cast(),
                ffn_out_bias: b.ffn_out_bias.cast(),
                ln2_gain: b.ln2_gain.cast(),
                ln2_bias: b.ln2_bias.cast(),
            })
            .collect();
        Model {
            cfg: self.cfg.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks,
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
        }
    }

    /// Records every tensor as a leaf; `trainable` controls whether the
    /// leaves collect gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let mut vars = Vec::new();
        let mut leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            vars.push(v);
            v
        };
        leaf(g, &self.tok_emb);
        leaf(g, &self.pos_emb);
        let mut attn = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let bound = b.attn.bind(g, trainable);
            vars.extend(bound.vars.iter().map(|(_, v)| *v));
            attn.push(bound);
            for t in [
                &b.ln1_gain,
                &b.ln1_bias,
                &b.ffn_in,
                &b.ffn_in_bias,
                &b.ffn_out,
                &b.ffn_out_bias,
                &b.ln2_gain,
                &b.ln2_bias,
            ] {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                vars.push(v);
            }
        }
        let mut tail = |g: &mut Graph<T>, t: &Tensor<T>| {
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            vars.push(v);
        };
        tail(g, &self.lnf_gain);
        tail(g, &self.lnf_bias);
        BoundModel { vars, attn }
    }

    /// Logits (`batch·seq × vocab`) for `batch` sequences of length `seq`
    /// laid out back to back in `tokens`. Pass an RNG to enable dropout.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.cfg;
        if seq == 0 || seq > cfg.max_seq_len {
            return Err(ModelError::Config(format!(
                "sequence length {seq} outside 1..={}",
                cfg.max_seq_len
            )));
        }
        if tokens.len() != batch * seq {
            return Err(TensorError::Dimension {
                op: "forward",
                lhs: vec![batch, seq],
                rhs: vec![tokens.len()],
            }
            .into());
        }
        let per_block = 8 + self.blocks.first().map_or(0, |b| b.attn.iter().count());
        let v = &bound.vars;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = g.gather(v[0], tokens)?;
        let pos = g.gather(v[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        for (i, attn) in bound.attn.iter().enumerate() {
            let base = 2 + i * per_block + attn.vars.len();
            let p = |k: usize| v[base + k];
            let h = g.layer_norm(x, p(0), p(1), LAYER_NORM_EPS)?;
            let a = attention::forward_graph(g, attn, h, batch, seq, cfg.arch.is_causal())?;
            let a = self.dropout(g, a, dropout_rng.as_deref_mut())?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, p(6), p(7), LAYER_NORM_EPS)?;
            let f = g.matmul(h, p(2))?;
            let f = g.add(f, p(3))?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p(4))?;
            let f = g.add(f, p(5))?;
            let f = self.dropout(g, f, dropout_rng.as_deref_mut())?;
            x = g.add(x, f)?;
        }
        let n = v.len();
        let x = g.layer_norm(x, v[n - 2], v[n - 1], LAYER_NORM_EPS)?;
        Ok(g.matmul_nt(x, v[0])?)
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var, TensorError> {
        let p = self.cfg.dropout;
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<T> = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }

    /// Inference logits for one batch.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &bound, tokens, batch, seq, None)?;
        Ok(g.value(out).clone())
    }

    /// Mean cross-entropy over positions with a target.
    pub fn loss(&self, tokens: &[usize], targets: &[Option<usize>], batch: usize, seq: usize) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let logits = self.forward_graph(&mut g, &bound, tokens, batch, seq, None)?;
        let l = g.cross_entropy(logits, targets)?;
        Ok(g.value(l).data()[0].as_f64())
    }

    /// Loss and per-tensor gradients in [`Model::named_params`] order.
    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        targets: &[Option<usize>],
        batch: usize,
        seq: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<Vec<T>>), ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, true);
        let logits = self.forward_graph(&mut g, &bound, tokens, batch, seq, dropout_rng)?;
        let l = g.cross_entropy(logits, targets)?;
        g.backward(l)?;
        let loss = g.value(l).data()[0].as_f64();
        let grads = bound
            .vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); g.value(v).numel()])
            })
            .collect();
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use AttentionVariant::*;

    fn tiny(variant: AttentionVariant) -> ModelConfig {
        ModelConfig::new(Arch::DecoderOnly, variant, 2, 2, 8, 16, 8, 3)
    }

    #[test]
    fn attention_counts_follow_accounting() {
        let m = Model::<f64>::build(tiny(MheMul)).unwrap();
        assert_eq!(m.attention_qkv_params(), 864);
        let m = Model::<f64>::build(tiny(Mha)).unwrap();
        assert_eq!(m.attention_qkv_params(), 1536);
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f64>::build(tiny(Skv)).unwrap();
        let b = Model::<f64>::build(tiny(Skv)).unwrap();
        let toks = [1, 2, 3, 4, 5, 6];
        let tg: Vec<Option<usize>> = toks.iter().map(|&t| Some((t + 1) % 16)).collect();
        assert_eq!(a.loss(&toks, &tg, 2, 3).unwrap(), b.loss(&toks, &tg, 2, 3).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny(Mha);
        c.vocab_size = 1;
        assert!(matches!(Model::<f64>::build(c), Err(ModelError::Config(_))));
        let mut c = tiny(Mha);
        c.n_layers = 0;
        assert!(Model::<f64>::build(c).is_err());
        let mut c = tiny(Mha);
        c.dropout = 1.0;
        assert!(Model::<f64>::build(c).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = tiny(ElAtt);
        c.dropout = 0.25;
        let lines = c.to_kv_lines();
        let pairs: Vec<(&str, &str)> = lines.iter().map(|l| l.split_once('=').unwrap()).collect();
        assert_eq!(ModelConfig::from_kv(pairs).unwrap(), c);
    }

    #[test]
    fn named_params_and_mut_agree() {
        let mut m = Model::<f64>::build(tiny(Mqa)).unwrap();
        let shapes: Vec<Vec<usize>> = m.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> = m.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true);
        assert_eq!(bound.vars.len(), shapes.len());
        for (v, s) in bound.vars.iter().zip(&shapes) {
            assert_eq!(g.shape(*v), s.as_slice());
        }
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let m = Model::<f64>::build(tiny(Mha)).unwrap();
        assert!(m.logits(&[0; 9], 1, 9).is_err());
    }
}
