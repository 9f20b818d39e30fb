//! Small reverse-mode differentiable core: tensors, a per-example tape,
//! the layers the detector needs, binary cross-entropy, Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod layers;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{gradient_check, GradCheckReport, GRADCHECK_FLOOR};
pub use graph::{bce_grad, bce_loss, Graph, NodeId, BCE_EPS};
pub use layers::{embedding_lookup, linear_forward, lstm_step, Embedding, Linear, LstmCell, Mlp};
pub use tensor::{ParamId, ParamRecord, ParamStore, Parameter, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("duplicate parameter {0}")]
    DuplicateParameter(String),
    #[error("backward needs a scalar output, got length {0}")]
    NonScalarOutput(usize),
}
