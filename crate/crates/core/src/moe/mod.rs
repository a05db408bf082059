//! Reference semantics of MoE routing and a small numeric interpreter.

mod exec;
mod routing;
mod sizes;

pub use exec::{device_seed, encode_state, exec_reference, DeviceValues, MoeEnv, Tensor, MAX_ELEMENTS};
pub use routing::{argmax, even_sizes, CapacityState, Route, Router, RoutingResult, Token, TokenBatch};
pub use sizes::{a2a_sizes, IrregularExchange, SizeMatrix};

use thiserror::Error;

use crate::ir::{GateKind, TensorId};

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("gate {0:?} does not support micro-batched routing")]
    UnsupportedGate(GateKind),
    #[error("token {token}: expected {expected} gate scores, got {got}")]
    ScoreLength { token: usize, expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("no value for tensor {0}")]
    MissingValue(TensorId),
    #[error("tensor {tensor}: declared shape {declared:?}, computed {actual:?}")]
    ShapeMismatch { tensor: TensorId, declared: Vec<usize>, actual: Vec<usize> },
    #[error("tensor {tensor} has {elements} elements, above the reference-execution limit")]
    TooLarge { tensor: TensorId, elements: usize },
}
