use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("label {label} out of range for {num_labels} labels")]
    Label { label: usize, num_labels: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocab { id: usize, vocab_size: usize },

    #[error("ingestion error{}: {message}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Ingestion { line: Option<u32>, message: String },

    #[error("alignment error: span {start}..{end} lies outside sentence of {len} chars: {text:?}")]
    Alignment {
        start: usize,
        end: usize,
        len: usize,
        text: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("incompatible checkpoint format version {found} (expected {expected})")]
    Incompatible { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Incompatible { .. } => 2,
            Error::Ingestion { .. }
            | Error::Alignment { .. }
            | Error::Data(_)
            | Error::Vocab { .. }
            | Error::Label { .. }
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Io(_)
            | Error::Integrity(_) => 3,
            Error::Numeric(_) => 4,
            Error::Dimension { .. } | Error::Contract(_) => 1,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
