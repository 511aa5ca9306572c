use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point lies behind the camera (depth {depth:e})")]
    BehindCamera { depth: f64 },
    #[error("rays are parallel or meet at infinity (|w| = {w:e})")]
    DegenerateRays { w: f64 },
    #[error("relative transform has zero baseline")]
    ZeroBaseline,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("point sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input is empty")]
    EmptyInput,
    #[error("line search found no descent direction at the first iterate")]
    NoDescent,
    #[error("every PnP restart diverged")]
    NoSolution,
    #[error("no regular polyhedron has {0} vertices (supported: 4, 6, 8, 12)")]
    UnsupportedCount(usize),
    #[error("heatmap has no positive mass")]
    AllZero,
    #[error("invalid heatmap: {0}")]
    InvalidHeatmap(&'static str),
    #[error("scene sampling exhausted after {0} attempts")]
    SamplingExhausted(usize),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("matrix is not a rotation (orthogonality error {ortho:e}, det {det})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("fundamental matrix is not rank 2 (singular value ratio {0:e})")]
    NotRankTwo(f64),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
