use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl NnError {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NnError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}, expected \"SCDP\"")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("tensor name is not valid UTF-8")]
    BadName,

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor name `{0}` exceeds 65535 bytes")]
    NameTooLong(String),

    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),

    #[error("missing tensor `{0}`")]
    Missing(String),

    #[error("tensor `{name}` has dtype {found:?}, expected {expected:?}")]
    WrongDtype {
        name: String,
        found: crate::Dtype,
        expected: crate::Dtype,
    },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    WrongShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
