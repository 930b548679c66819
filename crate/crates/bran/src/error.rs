use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration or input that fails a precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes incompatible for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Corpus line that does not follow the PubTator format.
    #[error("parse error in document {doc_id} at line {line}: {msg}")]
    Parse {
        doc_id: String,
        line: usize,
        msg: String,
    },

    /// A character span that cannot be mapped onto tokens.
    #[error("span alignment error: characters {start}..{end} cover no token")]
    Align { start: usize, end: usize },

    /// A broken internal contract (caller bug rather than bad data).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training aborted mid-run.
    #[error("training aborted at step {step}: {msg}")]
    TrainAbort { step: usize, msg: String },

    /// Malformed checkpoint or vocabulary file.
    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
