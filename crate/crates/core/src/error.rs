use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid timestep order: t={t}, t_prev={t_prev}")]
    TimestepOrder { t: i64, t_prev: i64 },

    #[error("timestep mismatch between image state ({image}) and mask state ({mask})")]
    TimestepMismatch { image: i64, mask: usize },

    #[error("class index {value} out of range for K={classes}")]
    ClassOutOfRange { value: usize, classes: usize },

    #[error("degenerate posterior: cumulative transition [{from}, {to}] is zero at t={t}")]
    Degenerate { t: usize, from: usize, to: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),

    #[error("missing checkpoint for stage `{stage}` (role {role}): {path}")]
    MissingCheckpoint {
        stage: String,
        role: String,
        path: PathBuf,
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidRange(_) => "invalid_range",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::TimestepOrder { .. } => "timestep_order",
            Error::TimestepMismatch { .. } => "timestep_mismatch",
            Error::ClassOutOfRange { .. } => "class_out_of_range",
            Error::Degenerate { .. } => "degenerate",
            Error::NonFinite(_) => "non_finite",
            Error::MissingGroundTruth(_) => "missing_ground_truth",
            Error::MissingCheckpoint { .. } => "missing_checkpoint",
            Error::MissingParam(_) => "missing_param",
            Error::CrcMismatch { .. } => "crc_mismatch",
            Error::Malformed(_) => "malformed",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }

    /// Errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidRange(_)
                | Error::ShapeMismatch(_)
                | Error::TimestepOrder { .. }
                | Error::TimestepMismatch { .. }
                | Error::ClassOutOfRange { .. }
                | Error::MissingGroundTruth(_)
                | Error::MissingCheckpoint { .. }
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
