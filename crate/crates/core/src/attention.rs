//! Attention mechanisms behind one parameter container and forward pass.
//!
//! All variants share the same outline: build per-head queries, keys and
//! values of width `d_h`, run scaled dot-product attention per head,
//! concatenate the heads to width `d_m = n·d_h`, and project with `W^O`.
//! They differ only in how the per-head Q/K/V are produced:
//!
//! | variant  | queries            | keys / values                          |
//! |----------|--------------------|----------------------------------------|
//! | MHA      | `X W_i^Q`          | `X W_i^K`, `X W_i^V`                   |
//! | SHA      | `X W^Q` (one head) | `X W^K`, `X W^V`; output copied n times |
//! | EL-att   | `X W_i^Q`          | column slice `i` of `X` for both       |
//! | MQA      | `X W_i^Q`          | shared `X W^K`, `X W^V`                |
//! | SKV      | `X W_i^Q`          | `X W_i^{KV}` for both                  |
//! | MHE-Add  | `X W^Q + e_i^Q`    | `X W^K + e_i^K`, `X W^V + e_i^V`       |
//! | MHE-Mul  | `X W^Q ⊙ (e_i^Q+1)`| likewise with `(e_i + 1)`              |
//!
//! Per-head projection matrices are stored side by side in one
//! `d_m × (n·d_h)` tensor; head `i` owns columns `i·d_h..(i+1)·d_h`. Head
//! embeddings are stored as the rows of an `n × d_h` tensor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use crate::variant::AttentionVariant;

pub const HEAD_EMBEDDING_STD: f64 = 0.02;

/// Initial weight standard deviation for a layer reading `fan_in` inputs.
pub fn init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Role of a learnable tensor inside an attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Query,
    Key,
    Value,
    /// Shared key/value projection (SKV).
    KeyValue,
    QueryEmbedding,
    KeyEmbedding,
    ValueEmbedding,
    Output,
}

impl ParamRole {
    pub fn name(self) -> &'static str {
        match self {
            ParamRole::Query => "wq",
            ParamRole::Key => "wk",
            ParamRole::Value => "wv",
            ParamRole::KeyValue => "wkv",
            ParamRole::QueryEmbedding => "eq",
            ParamRole::KeyEmbedding => "ek",
            ParamRole::ValueEmbedding => "ev",
            ParamRole::Output => "wo",
        }
    }

    pub fn is_embedding(self) -> bool {
        matches!(self, ParamRole::QueryEmbedding | ParamRole::KeyEmbedding | ParamRole::ValueEmbedding)
    }
}

/// Tensor roles and shapes of one layer, in initialization order.
pub fn param_layout(variant: AttentionVariant, n: usize, d_h: usize) -> Vec<(ParamRole, Vec<usize>)> {
    use AttentionVariant::*;
    use ParamRole::*;
    let d_m = n * d_h;
    let per_head = vec![d_m, d_m];
    let shared = vec![d_m, d_h];
    let mut layout = match variant {
        Mha => vec![(Query, per_head.clone()), (Key, per_head.clone()), (Value, per_head)],
        Sha | MheAdd | MheMul => vec![(Query, shared.clone()), (Key, shared.clone()), (Value, shared)],
        ElAtt => vec![(Query, per_head)],
        Mqa => vec![(Query, per_head), (Key, shared.clone()), (Value, shared)],
        Skv => vec![(Query, per_head.clone()), (KeyValue, per_head)],
    };
    layout.push((Output, vec![d_m, d_m]));
    if variant.is_mhe() {
        for role in [QueryEmbedding, KeyEmbedding, ValueEmbedding] {
            layout.push((role, vec![n, d_h]));
        }
    }
    layout
}

/// Learnable tensors of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams<T> {
    variant: AttentionVariant,
    n_heads: usize,
    head_dim: usize,
    tensors: Vec<(ParamRole, Tensor<T>)>,
}

impl<T: Scalar> AttentionLayerParams<T> {
    /// Draws projections from `Normal(0, 1/d_m)` and head embeddings from
    /// `Normal(0, 0.02²)`, deterministically in `seed`.
    pub fn init(variant: AttentionVariant, n_heads: usize, head_dim: usize, seed: u64) -> Result<Self, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(variant, n_heads, head_dim, &mut rng)
    }

    pub fn init_with_rng<R: rand::Rng + ?Sized>(
        variant: AttentionVariant,
        n_heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if n_heads == 0 || head_dim == 0 {
            return Err(TensorError::Contract(format!(
                "attention needs positive heads and head width, got n={n_heads}, d_h={head_dim}"
            )));
        }
        let std = init_std(n_heads * head_dim);
        let tensors = param_layout(variant, n_heads, head_dim)
            .into_iter()
            .map(|(role, shape)| {
                let std = if role.is_embedding() { HEAD_EMBEDDING_STD } else { std };
                (role, Tensor::randn(shape, std, rng))
            })
            .collect();
        Ok(Self {
            variant,
            n_heads,
            head_dim,
            tensors,
        })
    }

    /// Assembles a layer from explicit tensors; roles and shapes must match
    /// [`param_layout`] exactly (in any order).
    pub fn from_tensors(
        variant: AttentionVariant,
        n_heads: usize,
        head_dim: usize,
        tensors: Vec<(ParamRole, Tensor<T>)>,
    ) -> Result<Self, TensorError> {
        if n_heads == 0 || head_dim == 0 {
            return Err(TensorError::Contract("attention needs positive heads and head width".into()));
        }
        let layout = param_layout(variant, n_heads, head_dim);
        let mut ordered = Vec::with_capacity(layout.len());
        for (role, shape) in &layout {
            let t = tensors
                .iter()
                .find(|(r, _)| r == role)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| TensorError::Contract(format!("{variant}: missing tensor {}", role.name())))?;
            if t.shape() != shape.as_slice() {
                return Err(TensorError::Dimension {
                    op: "attention_params",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            ordered.push((*role, t));
        }
        if tensors.len() != layout.len() {
            return Err(TensorError::Contract(format!("{variant}: unexpected extra tensors")));
        }
        Ok(Self {
            variant,
            n_heads,
            head_dim,
            tensors: ordered,
        })
    }

    pub fn variant(&self) -> AttentionVariant {
        self.variant
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn get(&self, role: ParamRole) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(r, _)| *r == role).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, role: ParamRole) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|(r, _)| *r == role).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamRole, &Tensor<T>)> {
        self.tensors.iter().map(|(r, t)| (*r, t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamRole, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(r, t)| (*r, t))
    }

    /// Total learnable scalars, output projection included.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Sets every head embedding to zero (no-op for non-MHE variants).
    pub fn zero_head_embeddings(&mut self) {
        for (role, t) in &mut self.tensors {
            if role.is_embedding() {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> AttentionLayerParams<U> {
        AttentionLayerParams {
            variant: self.variant,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            tensors: self.tensors.iter().map(|(r, t)| (*r, t.cast())).collect(),
        }
    }

    /// Records every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundAttention {
        let vars = self
            .tensors
            .iter()
            .map(|(r, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (*r, v)
            })
            .collect();
        BoundAttention {
            variant: self.variant,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            vars,
        }
    }
}

/// An attention layer whose tensors live in a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundAttention {
    pub variant: AttentionVariant,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vars: Vec<(ParamRole, Var)>,
}

impl BoundAttention {
    fn var(&self, role: ParamRole) -> Var {
        self.vars
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("{} has no {} tensor", self.variant, role.name()))
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// `SoftMax(Q Kᵀ / √d_h) V` for one head; `causal` masks keys after the query.
pub fn scaled_dot_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    causal: bool,
) -> Result<Var, TensorError> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || qs != ks || ks != vs {
        let other = if qs != ks { ks } else { vs };
        return Err(TensorError::Dimension {
            op: "scaled_dot_attention",
            lhs: qs,
            rhs: other,
        });
    }
    let d_h = qs[1];
    let logits = g.matmul_nt(q, k)?;
    let scaled = g.scale(logits, T::from_f64(1.0 / (d_h as f64).sqrt()))?;
    let masked = if causal { g.causal_mask(scaled)? } else { scaled };
    let weights = g.softmax_rows(masked)?;
    g.matmul(weights, v)
}

/// Integrates a head embedding into a seed projection: `M + e` for
/// MHE-Add, `M ⊙ (e + 1)` for MHE-Mul. `e` broadcasts over the rows of `M`.
pub fn apply_head_embedding_graph<T: Scalar>(
    g: &mut Graph<T>,
    variant: AttentionVariant,
    m: Var,
    e: Var,
) -> Result<Var, TensorError> {
    match variant {
        AttentionVariant::MheAdd => g.add(m, e),
        AttentionVariant::MheMul => {
            let shifted = g.add_scalar(e, T::one())?;
            g.mul(m, shifted)
        }
        other => Err(TensorError::Contract(format!("{other} has no head embeddings"))),
    }
}

/// Per-head full-batch Q/K/V, each `rows × d_h`.
struct HeadInputs {
    q: Vec<Var>,
    k: Vec<Var>,
    v: Vec<Var>,
}

fn head_inputs<T: Scalar>(g: &mut Graph<T>, p: &BoundAttention, x: Var) -> Result<HeadInputs, TensorError> {
    use AttentionVariant::*;
    use ParamRole::*;
    let (n, d_h) = (p.n_heads, p.head_dim);
    let rows = g.shape(x)[0];
    let cols = |g: &mut Graph<T>, m: Var, i: usize| g.slice(m, 0, rows, i * d_h, d_h);

    let per_head = |g: &mut Graph<T>, w: Var| -> Result<Vec<Var>, TensorError> {
        let all = g.matmul(x, w)?;
        (0..n).map(|i| cols(g, all, i)).collect()
    };

    Ok(match p.variant {
        Mha => HeadInputs {
            q: per_head(g, p.var(Query))?,
            k: per_head(g, p.var(Key))?,
            v: per_head(g, p.var(Value))?,
        },
        Sha => {
            let q = g.matmul(x, p.var(Query))?;
            let k = g.matmul(x, p.var(Key))?;
            let v = g.matmul(x, p.var(Value))?;
            HeadInputs {
                q: vec![q],
                k: vec![k],
                v: vec![v],
            }
        }
        ElAtt => {
            let q = per_head(g, p.var(Query))?;
            let kv: Vec<Var> = (0..n).map(|i| cols(g, x, i)).collect::<Result<_, _>>()?;
            HeadInputs { q, k: kv.clone(), v: kv }
        }
        Mqa => {
            let q = per_head(g, p.var(Query))?;
            let k = g.matmul(x, p.var(Key))?;
            let v = g.matmul(x, p.var(Value))?;
            HeadInputs {
                q,
                k: vec![k; n],
                v: vec![v; n],
            }
        }
        Skv => {
            let q = per_head(g, p.var(Query))?;
            let kv = per_head(g, p.var(KeyValue))?;
            HeadInputs { q, k: kv.clone(), v: kv }
        }
        MheAdd | MheMul => {
            let mut out = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
            for (slot, (w, e)) in [(Query, QueryEmbedding), (Key, KeyEmbedding), (Value, ValueEmbedding)]
                .into_iter()
                .enumerate()
            {
                let seed = g.matmul(x, p.var(w))?;
                let table = p.var(e);
                for i in 0..n {
                    let row = g.slice(table, i, 1, 0, d_h)?;
                    out[slot].push(apply_head_embedding_graph(g, p.variant, seed, row)?);
                }
            }
            let [q, k, v] = out;
            HeadInputs { q, k, v }
        }
    })
}

/// Head outputs before the output projection. `x` stacks `batch`
/// sequences of length `seq` row-wise. Result is indexed `[head][sequence]`,
/// each `seq × d_h`. SHA reports its single head `n` times.
pub fn heads_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundAttention,
    x: Var,
    batch: usize,
    seq: usize,
    causal: bool,
) -> Result<Vec<Vec<Var>>, TensorError> {
    let d_m = p.model_dim();
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != d_m || xs[0] != batch * seq {
        return Err(TensorError::Dimension {
            op: "attention_forward",
            lhs: xs,
            rhs: vec![batch * seq, d_m],
        });
    }
    let inputs = head_inputs(g, p, x)?;
    let computed = inputs.q.len();
    let mut heads = Vec::with_capacity(computed);
    for h in 0..computed {
        let mut per_seq = Vec::with_capacity(batch);
        for b in 0..batch {
            let r0 = b * seq;
            let q = g.slice(inputs.q[h], r0, seq, 0, p.head_dim)?;
            let k = if batch == 1 { inputs.k[h] } else { g.slice(inputs.k[h], r0, seq, 0, p.head_dim)? };
            let v = if inputs.v[h] == inputs.k[h] {
                k
            } else if batch == 1 {
                inputs.v[h]
            } else {
                g.slice(inputs.v[h], r0, seq, 0, p.head_dim)?
            };
            per_seq.push(scaled_dot_attention_graph(g, q, k, v, causal)?);
        }
        heads.push(per_seq);
    }
    if computed == 1 && p.n_heads > 1 {
        let only = heads.pop().expect("one head");
        heads = vec![only; p.n_heads];
    }
    Ok(heads)
}

/// Full attention sublayer: heads, concatenation, output projection.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundAttention,
    x: Var,
    batch: usize,
    seq: usize,
    causal: bool,
) -> Result<Var, TensorError> {
    let heads = heads_graph(g, p, x, batch, seq, causal)?;
    let mut parts = Vec::with_capacity(p.n_heads * batch);
    for (i, per_seq) in heads.iter().enumerate() {
        for (b, &h) in per_seq.iter().enumerate() {
            parts.push((h, b * seq, i * p.head_dim));
        }
    }
    let concat = g.assemble(batch * seq, p.model_dim(), &parts)?;
    g.matmul(concat, p.var(ParamRole::Output))
}

/// Scaled dot-product attention on plain tensors.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
) -> Result<Tensor<T>, TensorError> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = scaled_dot_attention_graph(&mut g, q, k, v, causal)?;
    Ok(g.value(out).clone())
}

/// Head-embedding integration on plain tensors. `e` must have `M`'s column
/// count as its length.
pub fn apply_head_embedding<T: Scalar>(
    variant: AttentionVariant,
    m: &Tensor<T>,
    e: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let mut g = Graph::new();
    let (mv, ev) = (g.constant(m.clone()), g.constant(e.clone()));
    let out = apply_head_embedding_graph(&mut g, variant, mv, ev)?;
    Ok(g.value(out).clone())
}

/// Attention sublayer output for one sequence `x` of shape `L × d_m`.
pub fn attention_forward<T: Scalar>(
    params: &AttentionLayerParams<T>,
    x: &Tensor<T>,
    causal: bool,
) -> Result<Tensor<T>, TensorError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let seq = x.rows();
    let out = forward_graph(&mut g, &bound, xv, 1, seq, causal)?;
    Ok(g.value(out).clone())
}

/// Per-head outputs `H_i` (before the output projection) for one sequence.
pub fn attention_heads<T: Scalar>(
    params: &AttentionLayerParams<T>,
    x: &Tensor<T>,
    causal: bool,
) -> Result<Vec<Tensor<T>>, TensorError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let heads = heads_graph(&mut g, &bound, xv, 1, x.rows(), causal)?;
    Ok(heads.iter().map(|h| g.value(h[0]).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::attention_params;
    use AttentionVariant::*;

    #[test]
    fn init_counts() {
        let p = AttentionLayerParams::<f64>::init(MheMul, 2, 3, 1).unwrap();
        assert_eq!(p.scalar_count(), 108);
        let p = AttentionLayerParams::<f64>::init(Sha, 1, 2, 1).unwrap();
        assert_eq!(p.scalar_count(), 16);
    }

    #[test]
    fn init_is_deterministic() {
        let a = AttentionLayerParams::<f64>::init(Mqa, 3, 2, 42).unwrap();
        let b = AttentionLayerParams::<f64>::init(Mqa, 3, 2, 42).unwrap();
        assert_eq!(a, b);
        let c = AttentionLayerParams::<f64>::init(Mqa, 3, 2, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(AttentionLayerParams::<f64>::init(Mha, 0, 2, 0).is_err());
        assert!(AttentionLayerParams::<f64>::init(Mha, 2, 0, 0).is_err());
    }

    #[test]
    fn count_linkage_all_variants() {
        for v in AttentionVariant::ALL {
            for n in 1..=8usize {
                for d in 1..=8usize {
                    let shapes = param_layout(v, n, d);
                    let count: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
                    let expect = attention_params(v, n as u64, d as u64) + (n * d * n * d) as u64;
                    assert_eq!(count as u64, expect, "{v} n={n} d={d}");
                }
            }
        }
    }

    #[test]
    fn single_position_returns_values() {
        let q = Tensor::<f64>::from_rows(&[&[0.3, -1.0]]);
        let k = Tensor::from_rows(&[&[2.0, 0.5]]);
        let v = Tensor::from_rows(&[&[7.0, -3.0]]);
        assert_eq!(scaled_dot_attention(&q, &k, &v, false).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::<f64>::from_rows(&[&[1.0], &[-2.0], &[0.5]]);
        let k = Tensor::from_rows(&[&[0.7], &[0.7], &[0.7]]);
        let v = Tensor::from_rows(&[&[1.0], &[2.0], &[6.0]]);
        let out = scaled_dot_attention(&q, &k, &v, false).unwrap();
        for r in 0..3 {
            assert!((out.at(r, 0) - 3.0).abs() < 1e-12);
        }
        let out = scaled_dot_attention(&q, &k, &v, true).unwrap();
        assert_eq!(out.at(0, 0), 1.0);
        assert!((out.at(1, 0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn two_position_hand_example() {
        let q = Tensor::<f64>::from_rows(&[&[1.0], &[2.0]]);
        let k = Tensor::from_rows(&[&[1.0], &[0.0]]);
        let v = Tensor::from_rows(&[&[3.0], &[5.0]]);
        let out = scaled_dot_attention(&q, &k, &v, false).unwrap();
        let e = std::f64::consts::E;
        let expect0 = (3.0 * e + 5.0) / (1.0 + e);
        assert!((out.at(0, 0) - expect0).abs() < 1e-12);
        assert!((out.at(0, 0) - 3.537_882_842_739_990_3).abs() < 1e-12);
        // Row 1: logits [2, 0] → weights e²/(1+e²), 1/(1+e²).
        let e2 = e * e;
        assert!((out.at(1, 0) - (3.0 * e2 + 5.0) / (1.0 + e2)).abs() < 1e-12);
    }

    #[test]
    fn attention_shape_mismatch() {
        let q = Tensor::<f64>::zeros(vec![2, 3]);
        let k = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            scaled_dot_attention(&q, &k, &k, false),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn head_embedding_examples() {
        let m = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let zero = Tensor::zeros(vec![2]);
        assert_eq!(apply_head_embedding(MheAdd, &m, &zero).unwrap(), m);
        assert_eq!(apply_head_embedding(MheMul, &m, &zero).unwrap(), m);
        let m1 = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]);
        let e = Tensor::from_f64_slice(vec![2], &[1.0, -0.5]).unwrap();
        assert_eq!(apply_head_embedding(MheMul, &m1, &e).unwrap().data(), &[2.0, 1.0]);
        let short = Tensor::zeros(vec![3]);
        assert!(apply_head_embedding(MheAdd, &m, &short).is_err());
        assert!(apply_head_embedding(Mha, &m, &zero).is_err());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = AttentionLayerParams::<f64>::init(Mha, 2, 2, 0).unwrap();
        let x = Tensor::zeros(vec![3, 5]);
        assert!(matches!(attention_forward(&p, &x, false), Err(TensorError::Dimension { .. })));
    }
}
