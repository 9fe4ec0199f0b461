use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input at row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },
    #[error("non-uniform time spacing at row {row} (relative jitter {jitter:.3e})")]
    NonUniformTime { row: usize, jitter: f64 },
    #[error("series too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("all cells dropped: no cell reached min_count {min_count}")]
    AllCellsDropped { min_count: usize },
    #[error("cell {cell} has {count} members, need at least 2")]
    TooFewMembers { cell: usize, count: usize },
    #[error("quadrature did not converge (last change {change:.3e}, tolerance {tol:.3e})")]
    QuadratureNonConvergence { change: f64, tol: f64 },
    #[error("second-order moment is singular in cell {cell}")]
    SingularCovariance { cell: usize },
    #[error("moment order {0} not available")]
    MissingOrder(usize),
    #[error("group {group} admits {available} invariants, need more than {needed}")]
    TooFewInvariants {
        group: char,
        available: usize,
        needed: usize,
    },
    #[error("empty correspondence")]
    EmptyCorrespondence,
    #[error("too many degenerate neighbourhoods ({skipped} of {total})")]
    DegenerateNeighborhoods { skipped: usize, total: usize },
    #[error("largest connected component holds {largest} of {total} points")]
    Disconnected { largest: usize, total: usize },
    #[error("too few defined samples: {defined} of {total}")]
    TooFewDefined { defined: usize, total: usize },
    #[error("insufficient variation: {0}")]
    InsufficientVariation(String),
    #[error("insufficient cells: {have}, need {need}")]
    InsufficientCells { have: usize, need: usize },
    #[error("resonant frequency {freq_hz:.1} Hz exceeds Nyquist")]
    AboveNyquist { freq_hz: f64 },
    #[error("{fraction:.4} of samples clipped")]
    Clipping { fraction: f64 },
    #[error("mixing Jacobian check failed: min |det| {min_det:.3e}")]
    JacobianCheck { min_det: f64 },
    #[error("non-finite output from transform")]
    NonFiniteOutput,
    #[error("waveform shorter than one frame ({len} < {frame})")]
    WaveformTooShort { len: usize, frame: usize },
    #[error("residual fraction {residual:.3} at dim {target_dim} exceeds {threshold}; estimated intrinsic dimension {estimated}")]
    DimensionMismatch {
        target_dim: usize,
        residual: f64,
        threshold: f64,
        estimated: usize,
    },
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
