use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no evaluable pixels")]
    NoEvaluablePixels,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate light configuration (light matrix rank < 3)")]
    DegenerateLights,

    #[error("source behind object plane (l_z = {0})")]
    SourceBehindPlane(f64),

    #[error("intensity {0} outside the valid interval [0.2, 2.0]")]
    IntensityOutOfRange(f64),

    #[error("no highlight found in image {image}")]
    NoHighlight { image: usize },

    #[error("singular value decomposition did not converge within the iteration cap")]
    SvdNoConvergence,

    #[error("zero-norm normal at every pixel")]
    ZeroNormNormal,

    #[error("conjugate gradient stagnated after {iterations} iterations (relative residual {residual:.3e})")]
    CgStagnation { iterations: usize, residual: f64 },

    #[error("empty facet set")]
    EmptyFacets,

    #[error("coincident facet positions ({0} and {1})")]
    CoincidentFacets(usize, usize),

    #[error("non-physical albedo/kernel (spectral radius of PK = {0:.6})")]
    NonPhysical(f64),

    #[error("degenerate profile: {0}")]
    DegenerateProfile(String),

    #[error("{primitive}: {message}")]
    Primitive { primitive: &'static str, message: String },

    #[error("loss is not recorded on this tape")]
    LossNotOnTape,

    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(String),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt float map: {0}")]
    CorruptFloatMap(String),

    #[error("dimension mismatch in {path}: {message}")]
    DimensionMismatch { path: PathBuf, message: String },

    #[error("zero-length light direction at line {line} of {path}")]
    ZeroLengthLight { path: PathBuf, line: usize },

    #[error("cannot parse {path} line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn primitive(primitive: &'static str, message: impl Into<String>) -> Self {
        Error::Primitive { primitive, message: message.into() }
    }
}
