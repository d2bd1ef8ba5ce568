use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty lattice")]
    EmptyLattice,

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("row count mismatch: {0}")]
    RowCountMismatch(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("non-finite value in {record}")]
    NonFinite { record: String },

    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("basis exceeds lattice rank: L = {basis} > d = {voxels}")]
    BasisExceedsLattice { basis: usize, voxels: usize },

    #[error("degenerate basis: smallest relative singular value {ratio:e}")]
    DegenerateBasis { ratio: f64 },

    #[error("rank-deficient design: smallest singular value {smallest:e} (largest {largest:e})")]
    RankDeficient { smallest: f64, largest: f64 },

    #[error("separation or bad scaling in multinomial logit")]
    Separation,

    #[error("non-finite log-density for individual {individual}, coordinate {coordinate}")]
    NonFiniteDensity { individual: usize, coordinate: usize },

    #[error("degenerate group {group}")]
    DegenerateGroup { group: usize },

    #[error("singular exposure Gram matrix for group {group}")]
    SingularGram { group: usize },

    #[error("no viable fit")]
    NoViableFit,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
