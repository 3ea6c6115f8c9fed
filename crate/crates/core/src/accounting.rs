//! Exact parameter counts and training-memory footprints.
//!
//! Two counting conventions are exposed:
//!
//! * [`Convention::Table4`] counts only the query/key/value side of one
//!   attention sublayer (the output projection that pools heads is left out).
//! * [`Convention::Experiment`] adds the `d_m × d_m` output projection to
//!   every attention sublayer. Published per-model totals and the per-block
//!   byte breakdown use this convention.
//!
//! Everything is integer arithmetic; rounding only happens in [`display`].

use serde::Serialize;

use crate::variant::AttentionVariant;

/// Which parameters an attention sublayer count includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Convention {
    Table4,
    Experiment,
}

impl std::str::FromStr for Convention {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "table4" => Ok(Convention::Table4),
            "experiment" => Ok(Convention::Experiment),
            other => Err(format!("unknown convention {other:?}; expected table4 or experiment")),
        }
    }
}

/// Query/key/value parameters of one attention sublayer with `n` heads of
/// width `d` and model width `n·d`.
pub fn attention_params(variant: AttentionVariant, n: u64, d: u64) -> u64 {
    assert!(n >= 1 && d >= 1, "heads and head width must be positive");
    let d2 = d * d;
    match variant {
        AttentionVariant::Sha => 3 * d2 * n,
        AttentionVariant::Mha => 3 * d2 * n * n,
        AttentionVariant::ElAtt => d2 * n * n,
        AttentionVariant::Mqa => d2 * n * n + 2 * d2 * n,
        AttentionVariant::Skv => 2 * d2 * n * n,
        AttentionVariant::MheAdd | AttentionVariant::MheMul => 3 * d2 * n + 3 * d * n,
    }
}

/// Signed parameter difference to single-head attention. Negative for
/// EL-att when `n < 3`.
pub fn extra_over_sha(variant: AttentionVariant, n: u64, d: u64) -> i64 {
    let (n, d) = (n as i64, d as i64);
    let d2 = d * d;
    match variant {
        AttentionVariant::Sha => 0,
        AttentionVariant::Mha => (3 * n * n - 3 * n) * d2,
        AttentionVariant::ElAtt => (n * n - 3 * n) * d2,
        AttentionVariant::Mqa => (n * n - n) * d2,
        AttentionVariant::Skv => (2 * n * n - 3 * n) * d2,
        AttentionVariant::MheAdd | AttentionVariant::MheMul => 3 * n * d,
    }
}

/// The `d_m × d_m` head-pooling projection.
pub fn output_projection_params(n: u64, d: u64) -> u64 {
    (n * d) * (n * d)
}

/// Parameters of one attention sublayer under `convention`.
pub fn sublayer_params(variant: AttentionVariant, n: u64, d: u64, convention: Convention) -> u64 {
    match convention {
        Convention::Table4 => attention_params(variant, n, d),
        Convention::Experiment => attention_params(variant, n, d) + output_projection_params(n, d),
    }
}

/// Stack of attention sublayers in a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LayerLayout {
    pub encoder_layers: u64,
    pub decoder_layers: u64,
    /// Count the decoder's cross-attention as a second attention sublayer.
    pub cross_attention: bool,
}

impl LayerLayout {
    pub fn stack(layers: u64) -> Self {
        Self {
            encoder_layers: layers,
            decoder_layers: 0,
            cross_attention: false,
        }
    }

    pub fn encoder_decoder(encoder_layers: u64, decoder_layers: u64, cross_attention: bool) -> Self {
        Self {
            encoder_layers,
            decoder_layers,
            cross_attention,
        }
    }

    pub fn attention_sublayers(&self) -> u64 {
        let per_decoder = if self.cross_attention { 2 } else { 1 };
        self.encoder_layers + per_decoder * self.decoder_layers
    }
}

/// Per-model attention parameters as reported next to experimental
/// results: every layer contributes its QKV side plus the output projection.
pub fn experiment_params(variant: AttentionVariant, n_layers: u64, n: u64, d: u64) -> u64 {
    experiment_params_for(variant, LayerLayout::stack(n_layers), n, d)
}

pub fn experiment_params_for(variant: AttentionVariant, layout: LayerLayout, n: u64, d: u64) -> u64 {
    layout.attention_sublayers() * sublayer_params(variant, n, d, Convention::Experiment)
}

/// Mixed-precision training footprint in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryUsage {
    /// fp16 copy plus fp32 master weights: 6 bytes per parameter.
    pub weights: u64,
    /// fp16 plus fp32 gradients: 6 bytes per parameter.
    pub gradients: u64,
    /// Two fp32 Adam moments: 8 bytes per parameter.
    pub adam_states: u64,
    /// fp16 hidden states: 2 bytes per activation.
    pub activations: u64,
    pub total: u64,
}

pub const WEIGHT_BYTES: u64 = 2 + 4;
pub const GRADIENT_BYTES: u64 = 2 + 4;
pub const ADAM_BYTES: u64 = 4 + 4;
pub const ACTIVATION_BYTES: u64 = 2;

pub fn memory_usage(param_count: u64, batch: u64, seq: u64, d_m: u64) -> MemoryUsage {
    let weights = param_count * WEIGHT_BYTES;
    let gradients = param_count * GRADIENT_BYTES;
    let adam_states = param_count * ADAM_BYTES;
    let activations = batch * seq * d_m * ACTIVATION_BYTES;
    MemoryUsage {
        weights,
        gradients,
        adam_states,
        activations,
        total: weights + gradients + adam_states + activations,
    }
}

/// Memory saved relative to the multi-head baseline, in percent.
pub fn saving_ratio(candidate_total_bytes: u64, mha_total_bytes: u64) -> f64 {
    assert!(mha_total_bytes > 0, "reference footprint must be positive");
    100.0 * (1.0 - candidate_total_bytes as f64 / mha_total_bytes as f64)
}

/// Training geometry used for the byte model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Workload {
    pub batch: u64,
    pub seq: u64,
}

impl Default for Workload {
    /// BERT-base pre-training geometry.
    fn default() -> Self {
        Self { batch: 32, seq: 512 }
    }
}

/// Parameter and byte budget for `n_layers` attention blocks of one variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetReport {
    pub variant: AttentionVariant,
    pub n_layers: u64,
    pub n_heads: u64,
    pub head_dim: u64,
    pub per_layer_qkv: u64,
    pub per_layer_total: u64,
    pub model_qkv: u64,
    pub model_total: u64,
    pub bytes: MemoryUsage,
    pub saving_ratio_vs_mha: f64,
}

/// Budget of `n_layers` attention blocks. Bytes cover every block: the
/// activation term is charged once per block at model width `n·d`.
pub fn budget(variant: AttentionVariant, n_layers: u64, n: u64, d: u64, work: Workload) -> BudgetReport {
    let bytes_for = |v: AttentionVariant| {
        let per_block = memory_usage(sublayer_params(v, n, d, Convention::Experiment), work.batch, work.seq, n * d);
        scale_usage(per_block, n_layers)
    };
    let bytes = bytes_for(variant);
    let mha = bytes_for(AttentionVariant::Mha);
    let per_layer_qkv = attention_params(variant, n, d);
    let per_layer_total = per_layer_qkv + output_projection_params(n, d);
    BudgetReport {
        variant,
        n_layers,
        n_heads: n,
        head_dim: d,
        per_layer_qkv,
        per_layer_total,
        model_qkv: n_layers * per_layer_qkv,
        model_total: n_layers * per_layer_total,
        bytes,
        saving_ratio_vs_mha: saving_ratio(bytes.total, mha.total),
    }
}

fn scale_usage(u: MemoryUsage, k: u64) -> MemoryUsage {
    MemoryUsage {
        weights: u.weights * k,
        gradients: u.gradients * k,
        adam_states: u.adam_states * k,
        activations: u.activations * k,
        total: u.total * k,
    }
}

/// One (layers, heads) point of a scaling sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepPoint {
    pub layers: u64,
    pub heads: u64,
}

/// Budgets for every variant at every point, variants outermost, in input
/// order.
pub fn scale_sweep(variants: &[AttentionVariant], points: &[SweepPoint], d: u64, work: Workload) -> Vec<BudgetReport> {
    variants
        .iter()
        .flat_map(|&v| points.iter().map(move |p| budget(v, p.layers, p.heads, d, work)))
        .collect()
}

/// Header of the sweep CSV schema.
pub const SWEEP_CSV_HEADER: &str =
    "variant,layers,heads,head_dim,qkv_params,total_params,weights_bytes,grad_bytes,adam_bytes,act_bytes,total_bytes,saving_pct";

pub fn sweep_csv_row(r: &BudgetReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{:.2}",
        r.variant.tag(),
        r.n_layers,
        r.n_heads,
        r.head_dim,
        r.model_qkv,
        r.model_total,
        r.bytes.weights,
        r.bytes.gradients,
        r.bytes.adam_states,
        r.bytes.activations,
        r.bytes.total,
        r.saving_ratio_vs_mha,
    )
}

/// Renders sweep rows as CSV (header always present, LF endings).
pub fn sweep_csv(rows: &[BudgetReport]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&sweep_csv_row(r));
        out.push('\n');
    }
    out
}

pub mod display {
    /// `28311552` → `28,311,552`.
    pub fn thousands(n: u64) -> String {
        let s = n.to_string();
        let mut out = String::with_capacity(s.len() + s.len() / 3);
        for (i, ch) in s.chars().enumerate() {
            if i > 0 && (s.len() - i) % 3 == 0 {
                out.push(',');
            }
            out.push(ch);
        }
        out
    }

    /// Two-decimal M/B suffix, or `None` below one million.
    pub fn short(n: u64) -> Option<String> {
        if n >= 1_000_000_000 {
            Some(format!("{:.2}B", n as f64 / 1e9))
        } else if n >= 1_000_000 {
            Some(format!("{:.2}M", n as f64 / 1e6))
        } else {
            None
        }
    }

    /// `28,311,552 (28.32M)`; small numbers print plainly.
    pub fn count(n: u64) -> String {
        match short(n) {
            Some(s) => format!("{} ({s})", thousands(n)),
            None => thousands(n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use AttentionVariant::*;

    #[test]
    fn bert_base_mha_sublayer() {
        assert_eq!(attention_params(Mha, 12, 64), 1_769_472);
    }

    #[test]
    fn smallest_case() {
        assert_eq!(attention_params(MheAdd, 1, 1), 6);
        assert_eq!(attention_params(Sha, 1, 1), 3);
        assert_eq!(extra_over_sha(MheAdd, 1, 1), 3);
    }

    #[test]
    fn el_att_delta_is_negative_for_few_heads() {
        assert_eq!(extra_over_sha(ElAtt, 1, 4), -2 * 16);
        assert_eq!(extra_over_sha(ElAtt, 3, 4), 0);
    }

    #[test]
    fn mqa_block_matches_published_weight_bytes() {
        let qkv = attention_params(Mqa, 12, 64);
        assert_eq!(qkv, 688_128);
        let block = sublayer_params(Mqa, 12, 64, Convention::Experiment);
        assert_eq!(block * WEIGHT_BYTES, 7_667_712);
    }

    #[test]
    fn encoder_stack_totals() {
        assert_eq!(experiment_params(Mha, 12, 12, 64), 28_311_552);
        assert_eq!(experiment_params(MheMul, 12, 12, 64), 8_875_008);
    }

    #[test]
    fn memory_unit_case() {
        let m = memory_usage(1, 1, 1, 1);
        assert_eq!((m.weights, m.gradients, m.adam_states, m.activations, m.total), (6, 6, 8, 2, 22));
    }

    #[test]
    fn memory_published_blocks() {
        let m = memory_usage(2_359_296, 32, 512, 768);
        assert_eq!(m.weights, 14_155_776);
        assert_eq!(m.adam_states, 18_874_368);
        assert_eq!(m.activations, 25_165_824);
        assert_eq!(m.total, 72_351_744);
        assert_eq!(memory_usage(739_584, 32, 512, 768).total, 39_957_504);
    }

    #[test]
    fn saving_ratio_examples() {
        assert_eq!(format!("{:.2}", saving_ratio(39_957_504, 72_351_744)), "44.77");
        assert_eq!(format!("{:.2}", saving_ratio(60_555_264, 72_351_744)), "16.30");
        assert_eq!(saving_ratio(5, 5), 0.0);
    }

    #[test]
    fn budget_bytes_sum() {
        for v in AttentionVariant::ALL {
            let b = budget(v, 3, 4, 8, Workload::default());
            let s = b.bytes;
            assert_eq!(s.total, s.weights + s.gradients + s.adam_states + s.activations);
            assert_eq!(s.weights, s.gradients);
        }
    }

    #[test]
    fn empty_sweep_is_header_only() {
        assert_eq!(sweep_csv(&[]), format!("{SWEEP_CSV_HEADER}\n"));
    }

    #[test]
    fn display_helpers() {
        assert_eq!(display::thousands(28_311_552), "28,311,552");
        assert_eq!(display::thousands(999), "999");
        assert_eq!(display::count(28_311_552), "28,311,552 (28.31M)");
        assert_eq!(display::short(456_523_776).as_deref(), Some("456.52M"));
        assert_eq!(display::short(43_486_543_872).as_deref(), Some("43.49B"));
    }
}
