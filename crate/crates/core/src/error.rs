use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("cannot move orthogonality center {direction} from site {site} of {n_sites}")]
    Boundary {
        site: usize,
        n_sites: usize,
        direction: &'static str,
    },

    /// An exact zero overlap under the unregularized objective.
    #[error("singular overlap: sample {sample} has zero amplitude")]
    Singular { sample: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("stale environment cache: {0}")]
    StaleCache(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
