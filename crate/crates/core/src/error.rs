use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point behind camera (camera-frame depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("point at infinity: homography denominator {denominator:e} at ({x}, {y})")]
    PointAtInfinity { x: f64, y: f64, denominator: f64 },

    #[error("undistortion did not converge for point ({x}, {y})")]
    UndistortNoConvergence { x: f64, y: f64 },

    #[error("at least {required} {what} required, got {got}")]
    Arity {
        what: &'static str,
        required: usize,
        got: usize,
    },

    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),

    #[error("degenerate view set: {0}")]
    DegenerateViews(String),

    #[error("singular homography (not invertible)")]
    SingularHomography,

    #[error("board behind camera in view {view}")]
    BoardBehindCamera { view: String },

    #[error("refinement diverged (best rms so far {best_rms} px)")]
    RefinementDiverged { best_rms: f64 },

    #[error("view {view}: {source}")]
    InView {
        view: String,
        #[source]
        source: Box<Error>,
    },

    #[error("no overlap between the warped thermal image and the IR frame")]
    NoOverlap,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_view(view: impl Into<String>, source: Error) -> Self {
        Error::InView {
            view: view.into(),
            source: Box::new(source),
        }
    }

    /// True for errors caused by malformed or insufficient input, as opposed
    /// to numerical or I/O failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Arity { .. }
            | Error::Shape(_)
            | Error::Config(_)
            | Error::Invalid(_)
            | Error::Parse { .. } => true,
            Error::InView { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
