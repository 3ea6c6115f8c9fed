//! Performance retention ratio (PRR) and performance elasticity of
//! parameters (PEoP), and recomputation of published metric columns.

use std::collections::BTreeMap;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accounting::{experiment_params_for, LayerLayout};
use crate::error::MetricError;
use crate::variant::AttentionVariant;

/// Largest accepted |recomputed − published| PRR, in percentage points.
pub const PRR_TOLERANCE: f64 = 0.15;
/// Largest accepted relative PEoP deviation.
pub const PEOP_REL_TOLERANCE: f64 = 0.15;

/// Shipped table of published scores.
pub const PUBLISHED_SCORES_CSV: &str = include_str!("../data/published_scores.csv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndicatorKind {
    /// Higher is better (accuracy, F1, BLEU).
    Direct,
    /// Lower is better (perplexity).
    Inverse,
}

impl IndicatorKind {
    pub fn name(self) -> &'static str {
        match self {
            IndicatorKind::Direct => "direct",
            IndicatorKind::Inverse => "inverse",
        }
    }
}

impl FromStr for IndicatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(IndicatorKind::Direct),
            "inverse" => Ok(IndicatorKind::Inverse),
            other => Err(format!("unknown indicator kind {other:?}; expected direct or inverse")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Indicator {
    pub kind: IndicatorKind,
    pub name: String,
}

impl Indicator {
    /// Perplexity is inverse; every other named metric is direct.
    pub fn named(name: &str) -> Self {
        let kind = match name.to_ascii_lowercase().as_str() {
            "ppl" | "perplexity" => IndicatorKind::Inverse,
            _ => IndicatorKind::Direct,
        };
        Self { kind, name: name.to_string() }
    }
}

/// Score as a percentage of the MHA reference.
///
/// Direct: `100·s/m`. Inverse: `100·(1 − (s − m)/m)`.
pub fn prr(score: f64, mha_score: f64, kind: IndicatorKind) -> Result<f64, MetricError> {
    if !(mha_score > 0.0) {
        return Err(MetricError::NonPositiveReference("prr"));
    }
    Ok(match kind {
        IndicatorKind::Direct => 100.0 * score / mha_score,
        IndicatorKind::Inverse => 100.0 * (1.0 - (score - mha_score) / mha_score),
    })
}

/// Relative score change over SHA divided by relative parameter growth
/// over SHA; negated for inverse indicators.
pub fn peop(score: f64, sha_score: f64, params: u64, sha_params: u64, kind: IndicatorKind) -> Result<f64, MetricError> {
    if !(sha_score > 0.0) {
        return Err(MetricError::NonPositiveReference("peop"));
    }
    if sha_params == 0 {
        return Err(MetricError::NonPositiveReference("peop parameter count"));
    }
    if params == sha_params {
        return Err(MetricError::EqualParams(params));
    }
    let gain = score / sha_score - 1.0;
    let growth = params as f64 / sha_params as f64 - 1.0;
    Ok(match kind {
        IndicatorKind::Direct => gain / growth,
        IndicatorKind::Inverse => -gain / growth,
    })
}

/// Parameter layout a benchmark's models were built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamsLayout {
    /// 12 layers, 12 heads of width 64.
    Stack,
    /// 6 encoder + 6 decoder layers with cross-attention, 8 heads of 64.
    EncoderDecoder,
}

impl ParamsLayout {
    /// Experiment-convention attention parameters for `variant`.
    pub fn params(self, variant: AttentionVariant) -> u64 {
        match self {
            ParamsLayout::Stack => experiment_params_for(variant, LayerLayout::stack(12), 12, 64),
            ParamsLayout::EncoderDecoder => experiment_params_for(variant, LayerLayout::encoder_decoder(6, 6, true), 8, 64),
        }
    }
}

/// A printed number together with how many decimals it was printed with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Published {
    pub value: f64,
    pub decimals: u32,
}

impl Published {
    /// Half a unit in the last printed place.
    pub fn half_unit(&self) -> f64 {
        0.5 * 10f64.powi(-(self.decimals as i32))
    }

    /// Whether `x` rounds to the printed value.
    pub fn rounds_to(&self, x: f64) -> bool {
        (x - self.value).abs() <= self.half_unit() * (1.0 + 1e-9)
    }
}

impl FromStr for Published {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let value: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
        let decimals = s.split_once('.').map_or(0, |(_, f)| f.len() as u32);
        Ok(Self { value, decimals })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub benchmark: String,
    pub model: AttentionVariant,
    pub score: Published,
    pub kind: IndicatorKind,
    pub layout: ParamsLayout,
    pub published_prr: Option<Published>,
    pub published_peop: Option<Published>,
}

#[derive(Deserialize)]
struct RawRow {
    benchmark: String,
    model: String,
    score: String,
    indicator_kind: IndicatorKind,
    #[serde(default)]
    layout: Option<ParamsLayout>,
    #[serde(default)]
    published_prr: Option<String>,
    #[serde(default)]
    published_peop: Option<String>,
}

fn optional(field: Option<String>, line: usize) -> Result<Option<Published>, MetricError> {
    match field.as_deref().map(str::trim) {
        None | Some("") | Some("-") => Ok(None),
        Some(s) => s.parse().map(Some).map_err(|e| MetricError::Table(format!("line {line}: {e}"))),
    }
}

/// Reads `benchmark,model,score,indicator_kind[,layout,published_prr,published_peop]`.
/// Lines starting with `#` are comments. A missing layout means `stack`.
pub fn parse_scores(reader: impl Read) -> Result<Vec<ScoreRow>, MetricError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<RawRow>().enumerate() {
        let line = i + 2;
        let raw = rec.map_err(|e| MetricError::Table(e.to_string()))?;
        let model = raw
            .model
            .parse()
            .map_err(|e| MetricError::Table(format!("line {line}: {e}")))?;
        let score = raw
            .score
            .parse()
            .map_err(|e| MetricError::Table(format!("line {line}: {e}")))?;
        rows.push(ScoreRow {
            benchmark: raw.benchmark,
            model,
            score,
            kind: raw.indicator_kind,
            layout: raw.layout.unwrap_or(ParamsLayout::Stack),
            published_prr: optional(raw.published_prr, line)?,
            published_peop: optional(raw.published_peop, line)?,
        });
    }
    Ok(rows)
}

pub fn published_scores() -> Vec<ScoreRow> {
    parse_scores(PUBLISHED_SCORES_CSV.as_bytes()).expect("shipped score table parses")
}

/// Recomputed metrics for one (benchmark, model) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub benchmark: String,
    pub model_name: String,
    pub kind: IndicatorKind,
    pub score: f64,
    pub mha_score: f64,
    pub sha_score: f64,
    pub params: u64,
    pub sha_params: u64,
    pub prr: f64,
    /// `None` for SHA itself.
    pub peop: Option<f64>,
    pub published_prr: Option<Published>,
    pub published_peop: Option<Published>,
    /// `|prr − published| ≤ PRR_TOLERANCE`.
    pub prr_ok: Option<bool>,
    /// Some rounding of the two scores (within half a printed unit) gives a
    /// PRR that rounds to the published value.
    pub prr_rounding_consistent: Option<bool>,
    /// Relative deviation within `PEOP_REL_TOLERANCE`, or the recomputed
    /// value rounds to the published one at its printed precision.
    pub peop_ok: Option<bool>,
}

impl MetricReport {
    pub fn prr_deviation(&self) -> Option<f64> {
        self.published_prr.map(|p| self.prr - p.value)
    }

    pub fn peop_rel_deviation(&self) -> Option<f64> {
        match (self.peop, self.published_peop) {
            (Some(x), Some(p)) if p.value != 0.0 => Some((x - p.value) / p.value),
            _ => None,
        }
    }

    /// False if any recorded check failed.
    pub fn within_tolerance(&self) -> bool {
        self.prr_ok != Some(false) && self.peop_ok != Some(false)
    }
}

/// PEoP acceptance: relative tolerance, or agreement at the printed precision.
pub fn peop_matches(recomputed: f64, published: Published) -> bool {
    let rel_ok = published.value != 0.0 && ((recomputed - published.value) / published.value).abs() <= PEOP_REL_TOLERANCE;
    rel_ok || published.rounds_to(recomputed)
}

/// Range of PRR values reachable when each score may be off by half a
/// printed unit.
pub fn prr_range(score: Published, mha: Published, kind: IndicatorKind) -> (f64, f64) {
    let (s_lo, s_hi) = (score.value - score.half_unit(), score.value + score.half_unit());
    let (m_lo, m_hi) = (mha.value - mha.half_unit(), mha.value + mha.half_unit());
    let corners = [(s_lo, m_lo), (s_lo, m_hi), (s_hi, m_lo), (s_hi, m_hi)]
        .map(|(s, m)| prr(s, m, kind).unwrap_or(f64::NAN));
    let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Recomputes PRR and PEoP for every row, grouped by benchmark in first
/// appearance order.
pub fn build_report(rows: &[ScoreRow]) -> Result<Vec<MetricReport>, MetricError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.benchmark.as_str()) {
            order.push(&r.benchmark);
        }
        groups.entry(&r.benchmark).or_default().push(r);
    }
    let mut out = Vec::with_capacity(rows.len());
    for bench in order {
        let group = &groups[bench];
        let find = |v: AttentionVariant| {
            group
                .iter()
                .find(|r| r.model == v)
                .copied()
                .ok_or_else(|| MetricError::MissingReference {
                    benchmark: bench.to_string(),
                    model: v.label().to_string(),
                })
        };
        let mha = find(AttentionVariant::Mha)?;
        let sha = find(AttentionVariant::Sha)?;
        for r in group {
            if r.kind != mha.kind {
                return Err(MetricError::Table(format!("{bench}: mixed indicator kinds")));
            }
            let params = r.layout.params(r.model);
            let sha_params = sha.layout.params(AttentionVariant::Sha);
            let prr_v = prr(r.score.value, mha.score.value, r.kind)?;
            let peop_v = if r.model == AttentionVariant::Sha {
                None
            } else {
                Some(peop(r.score.value, sha.score.value, params, sha_params, r.kind)?)
            };
            let prr_rounding_consistent = r.published_prr.map(|p| {
                let (lo, hi) = prr_range(r.score, mha.score, r.kind);
                lo <= p.value + p.half_unit() && hi >= p.value - p.half_unit()
            });
            out.push(MetricReport {
                benchmark: bench.to_string(),
                model_name: r.model.label().to_string(),
                kind: r.kind,
                score: r.score.value,
                mha_score: mha.score.value,
                sha_score: sha.score.value,
                params,
                sha_params,
                prr: prr_v,
                peop: peop_v,
                published_prr: r.published_prr,
                published_peop: r.published_peop,
                prr_ok: r.published_prr.map(|p| (prr_v - p.value).abs() <= PRR_TOLERANCE),
                prr_rounding_consistent,
                peop_ok: match (peop_v, r.published_peop) {
                    (Some(x), Some(p)) => Some(peop_matches(x, p)),
                    _ => None,
                },
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prr_examples() {
        assert!((prr(82.5, 88.6, IndicatorKind::Direct).unwrap() - 93.115_124_153_498_87).abs() < 1e-9);
        assert!((prr(53.8, 43.0, IndicatorKind::Inverse).unwrap() - 74.883_720_930_232_56).abs() < 1e-9);
        for kind in [IndicatorKind::Direct, IndicatorKind::Inverse] {
            assert_eq!(prr(7.3, 7.3, kind).unwrap(), 100.0);
        }
        assert!(prr(1.0, 0.0, IndicatorKind::Direct).is_err());
    }

    #[test]
    fn peop_examples() {
        let v = peop(69.6, 67.1, 8_875_008, 8_847_360, IndicatorKind::Direct).unwrap();
        assert!((v - 11.92).abs() < 0.01, "{v}");
        let v = peop(24.7, 22.5, 14_155_776, 6_488_064, IndicatorKind::Direct).unwrap();
        assert!((v - 0.083).abs() < 0.001, "{v}");
        assert_eq!(peop(5.0, 5.0, 10, 3, IndicatorKind::Inverse).unwrap(), 0.0);
        assert!(matches!(peop(1.0, 1.0, 3, 3, IndicatorKind::Direct), Err(MetricError::EqualParams(3))));
    }

    #[test]
    fn published_precision() {
        let p: Published = "0.1".parse().unwrap();
        assert_eq!(p.decimals, 1);
        assert!(p.rounds_to(0.083) && !p.rounds_to(0.16));
        let q: Published = "12.07".parse().unwrap();
        assert_eq!(q.decimals, 2);
    }

    #[test]
    fn layouts_give_experiment_counts() {
        assert_eq!(ParamsLayout::Stack.params(AttentionVariant::MheMul), 8_875_008);
        assert_eq!(ParamsLayout::EncoderDecoder.params(AttentionVariant::Mha), 18_874_368);
    }

    #[test]
    fn empty_table_gives_empty_report() {
        let rows = parse_scores("benchmark,model,score,indicator_kind\n".as_bytes()).unwrap();
        assert!(build_report(&rows).unwrap().is_empty());
    }

    #[test]
    fn missing_reference_names_the_benchmark() {
        let rows = parse_scores("benchmark,model,score,indicator_kind\nx,mha,1.0,direct\n".as_bytes()).unwrap();
        let err = build_report(&rows).unwrap_err();
        assert!(err.to_string().contains("\"x\""), "{err}");
    }

    #[test]
    fn shipped_table_parses() {
        let rows = published_scores();
        assert_eq!(rows.len(), 56);
    }
}
