//! Dense matrices with reverse-mode differentiation, Adam, Xavier
//! initialization and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod params;
pub mod tape;

use thiserror::Error;

pub use params::{AdamConfig, Gradients, Parameter, ParameterStore};
pub use tape::{Matrix, Reduce, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: {message}")]
    Domain { op: &'static str, message: String },
    #[error("non-finite gradient produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
}
