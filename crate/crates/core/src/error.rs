use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("audio too short: {got} samples, need at least {need} ({need_ms} ms)")]
    AudioTooShort { got: usize, need: usize, need_ms: f64 },

    #[error("sample rate {got} Hz does not match the configured {expected} Hz (no resampling is performed)")]
    SampleRate { got: u32, expected: u32 },

    #[error("cannot form distractors: target step {0} is the only masked step")]
    DegenerateMask(usize),

    #[error("non-finite gradient at step {step} in parameter `{param}`")]
    NonFiniteGradient { step: usize, param: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint config conflict: {0}")]
    ConfigConflict(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
