//! Central finite-difference checks of the analytic gradients, per graph
//! primitive and per model parameter tensor.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ModelError, TensorError};
use crate::graph::{Graph, OpKind, Var};
use crate::model::{Arch, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::variant::AttentionVariant;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    /// Finite-difference step.
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { h: 1e-5, rtol: 1e-3, atol: 1e-6 }
    }
}

impl Tolerance {
    pub fn close(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.atol + self.rtol * analytic.abs().max(numeric.abs())
    }
}

/// Outcome for one primitive or one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub failed: usize,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Default)]
struct Accum {
    checked: usize,
    failed: usize,
    max_abs_err: f64,
}

impl Accum {
    fn add(&mut self, tol: &Tolerance, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        if !tol.close(analytic, numeric) {
            self.failed += 1;
        }
    }

    fn finish(self, group: String) -> GroupResult {
        GroupResult {
            group,
            checked: self.checked,
            failed: self.failed,
            passed: self.failed == 0,
            max_abs_err: self.max_abs_err,
        }
    }
}

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

/// One primitive applied to random inputs.
struct Case {
    op: OpKind,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn rand_t(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::rand_uniform(vec![rows, cols], -1.0, 1.0, rng)
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut d = || rng.gen_range(1..=4usize);
    let (m, k, p) = (d(), d(), d());
    let (r, c) = (d(), d());
    let n = d().max(2);
    let (m2, c2) = (d().max(2), d().max(2));
    let rng = &mut *rng;
    vec![
        Case { op: OpKind::MatMul, inputs: vec![rand_t(rng, m, k), rand_t(rng, k, p)], build: |g, v| g.matmul(v[0], v[1]) },
        Case { op: OpKind::MatMulNt, inputs: vec![rand_t(rng, m, k), rand_t(rng, p, k)], build: |g, v| g.matmul_nt(v[0], v[1]) },
        Case { op: OpKind::Transpose, inputs: vec![rand_t(rng, r, c)], build: |g, v| g.transpose(v[0]) },
        Case { op: OpKind::Add, inputs: vec![rand_t(rng, r, c), rand_t(rng, r, c)], build: |g, v| g.add(v[0], v[1]) },
        Case { op: OpKind::Add, inputs: vec![rand_t(rng, r, c), rand_t(rng, 1, c)], build: |g, v| g.add(v[0], v[1]) },
        Case { op: OpKind::Mul, inputs: vec![rand_t(rng, r, c), rand_t(rng, r, c)], build: |g, v| g.mul(v[0], v[1]) },
        Case { op: OpKind::Mul, inputs: vec![rand_t(rng, r, c), rand_t(rng, 1, c)], build: |g, v| g.mul(v[0], v[1]) },
        Case { op: OpKind::AddScalar, inputs: vec![rand_t(rng, r, c)], build: |g, v| g.add_scalar(v[0], 0.7) },
        Case { op: OpKind::Scale, inputs: vec![rand_t(rng, r, c)], build: |g, v| g.scale(v[0], -1.3) },
        Case { op: OpKind::SoftmaxRows, inputs: vec![rand_t(rng, r, c2)], build: |g, v| g.softmax_rows(v[0]) },
        Case {
            op: OpKind::CausalMask,
            inputs: vec![rand_t(rng, n, n)],
            build: |g, v| {
                let m = g.causal_mask(v[0])?;
                g.softmax_rows(m)
            },
        },
        Case { op: OpKind::Slice, inputs: vec![rand_t(rng, m2, c2)], build: |g, v| g.slice(v[0], 1, 1, 1, 1) },
        Case {
            op: OpKind::Assemble,
            inputs: vec![rand_t(rng, r, 1), rand_t(rng, r, 2)],
            build: |g, v| {
                let r = g.shape(v[0])[0];
                g.assemble(r, 3, &[(v[0], 0, 0), (v[1], 0, 1)])
            },
        },
        Case { op: OpKind::Gather, inputs: vec![rand_t(rng, 4, c)], build: |g, v| g.gather(v[0], &[2, 0, 2, 3]) },
        Case {
            op: OpKind::LayerNorm,
            inputs: vec![rand_t(rng, r, c2), rand_t(rng, 1, c2), rand_t(rng, 1, c2)],
            build: |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        Case { op: OpKind::Gelu, inputs: vec![Tensor::rand_uniform(vec![r, c], -3.0, 3.0, rng)], build: |g, v| g.gelu(v[0]) },
        Case {
            op: OpKind::CrossEntropy,
            inputs: vec![rand_t(rng, 3, 4)],
            build: |g, v| g.cross_entropy(v[0], &[Some(1), None, Some(3)]),
        },
        Case { op: OpKind::Sum, inputs: vec![rand_t(rng, r, c)], build: |g, v| g.sum(v[0]) },
        Case { op: OpKind::Mean, inputs: vec![rand_t(rng, r, c)], build: |g, v| g.mean(v[0]) },
    ]
}

/// Reduces an op output to a scalar with fixed random weights, avoiding
/// the op under test so an injected fault cannot cancel itself.
fn scalarize(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>, op: OpKind) -> Result<Var, TensorError> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = g.constant(weights.clone());
    let weighted = if op == OpKind::Mul {
        // Column weights via a matrix product instead of an elementwise one.
        let col = g.constant(weights.clone().reshape(vec![weights.numel(), 1]).expect("reshape"));
        let flat_cols = g.value(out).cols();
        let col = g.slice(col, 0, flat_cols, 0, 1)?;
        g.matmul(out, col)?
    } else {
        g.mul(out, w)?
    };
    g.sum(weighted)
}

fn case_loss(case: &Case, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = scalarize(&mut g, out, weights, case.op)?;
    Ok(g.value(loss).data()[0])
}

fn check_case(case: &Case, weights: &Tensor<f64>, tol: &Tolerance, fault: Option<OpKind>) -> Result<Accum, TensorError> {
    let mut g = Graph::new();
    g.inject_backward_fault(fault);
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = scalarize(&mut g, out, weights, case.op)?;
    g.backward(loss)?;
    let mut acc = Accum::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; case.inputs[i].numel()]);
        for j in 0..case.inputs[i].numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += tol.h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= tol.h;
            let numeric = (case_loss(case, &plus, weights)? - case_loss(case, &minus, weights)?) / (2.0 * tol.h);
            acc.add(tol, analytic[j], numeric);
        }
    }
    Ok(acc)
}

/// Checks every differentiable primitive on random inputs with at most 4
/// rows and columns. One result per op, named after it.
pub fn check_primitives(seed: u64, tol: &Tolerance, fault: Option<OpKind>) -> Result<Vec<GroupResult>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<(OpKind, Accum)> = Vec::new();
    for case in cases(&mut rng) {
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = (case.build)(&mut g, &vars)?;
            g.shape(out).to_vec()
        };
        let weights = Tensor::rand_uniform(out_shape, 0.5, 1.5, &mut rng);
        let acc = check_case(&case, &weights, tol, fault)?;
        match results.iter_mut().find(|(k, _)| *k == case.op) {
            Some((_, a)) => {
                a.checked += acc.checked;
                a.failed += acc.failed;
                a.max_abs_err = a.max_abs_err.max(acc.max_abs_err);
            }
            None => results.push((case.op, acc)),
        }
    }
    Ok(results.into_iter().map(|(k, a)| a.finish(k.name().to_string())).collect())
}

/// Model used by the end-to-end checks: one layer, two heads of width two,
/// vocabulary five, sequence length four.
pub fn gradcheck_config(variant: AttentionVariant, arch: Arch, seed: u64) -> ModelConfig {
    ModelConfig::new(arch, variant, 1, 2, 2, 5, 4, seed)
}

/// Builds the gradcheck model and moves it away from the small-weight
/// initialization so every gradient is well above the absolute tolerance.
pub fn gradcheck_model(variant: AttentionVariant, arch: Arch, seed: u64) -> Result<Model<f64>, ModelError> {
    let mut model = Model::<f64>::build(gradcheck_config(variant, arch, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.params_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    Ok(model)
}

struct Batch {
    tokens: Vec<usize>,
    targets: Vec<Option<usize>>,
    batch: usize,
    seq: usize,
}

fn random_batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c);
    let (batch, seq) = (2, cfg.max_seq_len);
    let tokens = (0..batch * seq).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let targets = (0..batch * seq).map(|_| Some(rng.gen_range(0..cfg.vocab_size))).collect();
    Batch { tokens, targets, batch, seq }
}

fn analytic_grads(model: &Model<f64>, b: &Batch, fault: Option<OpKind>) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut g = Graph::new();
    g.inject_backward_fault(fault);
    let bound = model.bind(&mut g, true);
    let logits = model.forward_graph(&mut g, &bound, &b.tokens, b.batch, b.seq, None)?;
    let loss = g.cross_entropy(logits, &b.targets)?;
    g.backward(loss)?;
    Ok(bound
        .vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect())
}

fn numeric_grad(model: &Model<f64>, b: &Batch, tensor: usize, index: usize, h: f64) -> Result<f64, ModelError> {
    let eval = |delta: f64| -> Result<f64, ModelError> {
        let mut m = model.clone();
        m.params_mut()[tensor].data_mut()[index] += delta;
        m.loss(&b.tokens, &b.targets, b.batch, b.seq)
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

/// Checks every scalar of every parameter tensor; one result per tensor.
pub fn check_model(model: &Model<f64>, seed: u64, tol: &Tolerance, fault: Option<OpKind>) -> Result<Vec<GroupResult>, ModelError> {
    let b = random_batch(model.config(), seed);
    let grads = analytic_grads(model, &b, fault)?;
    let mut out = Vec::new();
    for (i, (name, t)) in model.named_params().into_iter().enumerate() {
        let mut acc = Accum::default();
        for j in 0..t.numel() {
            acc.add(tol, grads[i][j], numeric_grad(model, &b, i, j, tol.h)?);
        }
        out.push(acc.finish(name));
    }
    Ok(out)
}

/// Checks `count` randomly chosen parameter scalars.
pub fn check_model_sampled(model: &Model<f64>, count: usize, seed: u64, tol: &Tolerance) -> Result<GroupResult, ModelError> {
    let b = random_batch(model.config(), seed);
    let grads = analytic_grads(model, &b, None)?;
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a3b1e);
    let mut acc = Accum::default();
    for flat in sample(&mut rng, total, count.min(total)) {
        let (mut i, mut j) = (0, flat);
        while j >= sizes[i] {
            j -= sizes[i];
            i += 1;
        }
        acc.add(tol, grads[i][j], numeric_grad(model, &b, i, j, tol.h)?);
    }
    Ok(acc.finish(format!("{count} sampled scalars")))
}
