use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("degenerate box: enclosed points have zero extent")]
    DegenerateBox,

    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),

    #[error("correspondences are rank deficient (collinear or coincident points)")]
    RankDeficient,

    #[error("point maps to infinity under the homography")]
    PointAtInfinity,

    #[error("ray angle {theta} exceeds the lens limit {max_theta}")]
    OutsideImage { theta: f64, max_theta: f64 },

    #[error("transformed patch leaves the frame")]
    PatchOutsideFrame,

    #[error("region partition has an empty overlap")]
    EmptyOverlap,

    #[error("frame {0}x{1} is too small (minimum 3x3)")]
    FrameTooSmall(usize, usize),

    #[error("dilation kernel must be odd, got {0}")]
    EvenKernel(usize),

    #[error("timestamp {got} precedes newest entry {newest}")]
    OutOfOrder { got: f64, newest: f64 },

    #[error("average precision is undefined: no ground truth in the set")]
    UndefinedAp,

    #[error("stream desynchronized: {0}")]
    Desync(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
