//! Reverse-mode differentiation over dense tensors, limited to the operators
//! the TDNN and HLTDNN models use, plus the Adagrad optimizer.

mod adagrad;
mod checkpoint;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adagrad::{Adagrad, DEFAULT_EPS, DEFAULT_LR};
pub use checkpoint::Checkpoint;
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tape::Op;
