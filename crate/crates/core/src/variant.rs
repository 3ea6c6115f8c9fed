use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The closed set of attention mechanisms under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionVariant {
    /// One shared-projection head, replicated to model width.
    Sha,
    /// Standard multi-head attention.
    Mha,
    /// Per-head queries; keys and values are unprojected slices of the input.
    ElAtt,
    /// Per-head queries, one shared key and one shared value projection.
    Mqa,
    /// Per-head queries; keys and values share one projection per head.
    Skv,
    /// Shared seed projections plus additive head embeddings.
    MheAdd,
    /// Shared seed projections scaled by `(1 + head embedding)`.
    MheMul,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 7] = [
        AttentionVariant::Sha,
        AttentionVariant::Mha,
        AttentionVariant::ElAtt,
        AttentionVariant::Mqa,
        AttentionVariant::Skv,
        AttentionVariant::MheAdd,
        AttentionVariant::MheMul,
    ];

    /// Command-line tag, e.g. `mhe-mul`.
    pub fn tag(self) -> &'static str {
        match self {
            AttentionVariant::Sha => "sha",
            AttentionVariant::Mha => "mha",
            AttentionVariant::ElAtt => "el-att",
            AttentionVariant::Mqa => "mqa",
            AttentionVariant::Skv => "skv",
            AttentionVariant::MheAdd => "mhe-add",
            AttentionVariant::MheMul => "mhe-mul",
        }
    }

    /// Display name as used in published tables, e.g. `MHE-Mul`.
    pub fn label(self) -> &'static str {
        match self {
            AttentionVariant::Sha => "SHA",
            AttentionVariant::Mha => "MHA",
            AttentionVariant::ElAtt => "EL-att",
            AttentionVariant::Mqa => "MQA",
            AttentionVariant::Skv => "SKV",
            AttentionVariant::MheAdd => "MHE-Add",
            AttentionVariant::MheMul => "MHE-Mul",
        }
    }

    pub fn is_mhe(self) -> bool {
        matches!(self, AttentionVariant::MheAdd | AttentionVariant::MheMul)
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown attention variant {0:?}; expected one of sha, mha, el-att, mqa, skv, mhe-add, mhe-mul")]
pub struct UnknownVariant(pub String);

impl FromStr for AttentionVariant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == norm)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}
