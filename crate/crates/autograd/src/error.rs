use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

impl TensorError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
