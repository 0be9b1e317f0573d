//! Dense-tensor engine with reverse-mode autodiff and AdamW.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{check_graph, rel_err, run_suite, CheckResult, GraphFn, FD_STEP, REL_TOL};
pub use optim::AdamW;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss is not connected to any tracked leaf")]
    UntrackedLoss,
    #[error("backward: loss must have shape [] or [1], got {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: computation record already consumed")]
    RecordConsumed,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}
