use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed for image `{image_id}`: {message}")]
    Validation { image_id: String, message: String },

    #[error("synthetic corpus generation failed: {0}")]
    Generation(String),

    #[error("region of interest {0} lies entirely outside the feature map")]
    RoiOutside(String),

    #[error("no proposals to sample from")]
    NoProposals,

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("unsupported checkpoint format version {found} (this build reads {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint is corrupted: {0}")]
    Corrupt(String),

    #[error("task mismatch: checkpoint was trained for {found}, requested {expected}")]
    TaskMismatch { found: String, expected: String },

    #[error("dataset and vocabulary disagree: {0}")]
    DatasetMismatch(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::InvalidArgument(_)
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Config(_)
                | Error::DatasetMismatch(_)
                | Error::TaskMismatch { .. }
                | Error::UnsupportedVersion { .. }
                | Error::EmptyCorpus
        )
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
