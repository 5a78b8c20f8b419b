use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("point has non-positive camera depth {0}")]
    NonPositiveDepth(f64),
    #[error("dims mismatch: expected {expected:?}, found {found:?}")]
    DimsMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("missing parameter block `{0}`")]
    MissingParam(String),
    #[error("invalid depth range near={near} far={far} count={count}")]
    InvalidRange { near: f64, far: f64, count: usize },
    #[error("at least two views are required, got {0}")]
    TooFewViews(usize),
    #[error("view direction is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("image {height}x{width} is smaller than the {min}x{min} window")]
    TooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("view {view}: {source}")]
    View {
        view: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }

    /// Attach a view index to an error.
    pub fn in_view(self, view: usize) -> Self {
        Error::View {
            view,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 validation, 3 I/O, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::View { source, .. } => source.exit_code(),
            Error::MissingFile(_) | Error::Io(_) | Error::Format { .. } | Error::Image(_) => 3,
            Error::NonFinite(_) => 4,
            _ => 2,
        }
    }
}

pub(crate) trait ViewContext<T> {
    fn view(self, view: usize) -> Result<T>;
}

impl<T> ViewContext<T> for Result<T> {
    fn view(self, view: usize) -> Result<T> {
        self.map_err(|e| e.in_view(view))
    }
}
