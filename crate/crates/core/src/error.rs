use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A block does not fit on the array it was scheduled to.
    #[error("infeasible block: {0}")]
    InfeasibleBlock(String),

    /// The requested (N_p, S_i) violates the array/block-size constraint table.
    #[error("infeasible design point (n_p={n_p}, s_i={s_i}):\n{rows}")]
    InfeasiblePoint {
        n_p: usize,
        s_i: usize,
        rows: String,
    },

    #[error("no bandwidth calibration for n_p={n_p}, s_i={s_i}")]
    CalibrationMissing { n_p: usize, s_i: usize },

    #[error("calibration rejected:\n  {}", .0.join("\n  "))]
    CalibrationRejected(Vec<String>),

    #[error("steal victim {victim} has no pending work")]
    VictimEmpty { victim: usize },

    #[error("simulation deadlock: {0}")]
    Deadlock(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
