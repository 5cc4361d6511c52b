//! Error taxonomy shared by every module.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad ranges, unknown keys,
    /// incompatible model/dataset pairs).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape disagreement. Forward never broadcasts silently; every
    /// mismatch surfaces here.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Caller-supplied data is out of domain (label out of range, empty
    /// dataset, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Operation invoked out of order (e.g. backward without a cached
    /// forward).
    #[error("state error: {0}")]
    State(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed binary or text input, with the byte offset of the problem.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Pruning removed every unit of a layer.
    #[error("layer collapse: layer {layer} lost all {units} units at keep rate {keep_rate}")]
    LayerCollapse {
        layer: usize,
        units: usize,
        keep_rate: f32,
    },

    /// Federation protocol violation (empty cohort, mask/layout mismatch).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 = config, 2 = data, 3 = numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Input(_) | Error::Parse { .. } | Error::Io(_) => 2,
            Error::Dimension(_)
            | Error::State(_)
            | Error::Numeric(_)
            | Error::LayerCollapse { .. }
            | Error::Protocol(_) => 3,
        }
    }
}
