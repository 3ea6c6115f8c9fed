//! Memory-efficient attention laboratory: a small tensor engine with
//! reverse-mode differentiation, the attention variants it is used to
//! compare, a desk-scale training harness, and exact parameter/memory
//! accounting plus efficiency metrics.

pub mod accounting;
pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
mod kernels;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod variant;

pub use error::{MetricError, ModelError, TensorError};
pub use graph::{EwiseOp, Graph, OpKind, Var};
pub use tensor::{Scalar, Tensor};
pub use variant::AttentionVariant;
pub use attention::{AttentionLayerParams, ParamRole};
pub use model::{Arch, Model, ModelConfig};
pub use optim::{AdamWConfig, Schedule};
pub use train::{train, Objective, TrainConfig, TrainReport};
pub use eval::evaluate_perplexity;
