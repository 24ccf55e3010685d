use alloc::string::String;

/// Errors produced by the numeric core and the model code built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An op received inputs whose shapes it cannot combine.
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },
    /// A named parameter is missing or has the wrong shape.
    #[error("parameter `{name}`: {detail}")]
    Parameter { name: String, detail: String },
    #[error("backward requires a scalar root, got {numel} elements")]
    NonScalarRoot { numel: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unit id {id} out of range for vocabulary of size {size}")]
    InvalidUnit { id: u32, size: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("every training sample is infeasible for CTC alignment: {0}")]
    AllInfeasible(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
