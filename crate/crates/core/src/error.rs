use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },

    #[error("input of {samples} samples is shorter than the {min}-sample receptive field")]
    TooShort { samples: usize, min: usize },

    #[error("target needs at least {required} frames but only {frames} are available")]
    InfeasibleAlignment { frames: usize, required: usize },

    #[error("insufficient masked context for frame {0}")]
    InsufficientContext(usize),

    #[error("symbols outside the vocabulary: {0:?}")]
    OutOfVocabulary(Vec<String>),

    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("malformed ARPA file at line {line}: {msg}")]
    Arpa { line: usize, msg: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    /// `None` means the array is absent on that side.
    #[error("checkpoint array `{name}` has shape {}, model expects {}", shape_str(.found), shape_str(.expected))]
    CheckpointShape {
        name: String,
        expected: Option<Vec<usize>>,
        found: Option<Vec<usize>>,
    },

    #[error("checkpoint config hash {found} does not match model config hash {expected}")]
    ConfigHash { expected: String, found: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn shape_str(s: &Option<Vec<usize>>) -> String {
    match s {
        Some(s) => format!("{s:?}"),
        None => "<absent>".into(),
    }
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable machine-readable code, used by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::CheckpointShape { .. } => "E_SHAPE",
            Error::NonFinite(_) => "E_NON_FINITE",
            Error::Config(_) | Error::StepOutOfRange { .. } => "E_CONFIG",
            Error::InvalidInput(_)
            | Error::TooShort { .. }
            | Error::InfeasibleAlignment { .. }
            | Error::InsufficientContext(_)
            | Error::OutOfVocabulary(_) => "E_INPUT",
            Error::Manifest { .. } | Error::Csv(_) | Error::Wav(_) => "E_DATA",
            Error::Arpa { .. } => "E_LM",
            Error::CorruptCheckpoint(_)
            | Error::CheckpointVersion(_)
            | Error::ConfigHash { .. } => "E_CHECKPOINT",
            Error::MissingArtifact(_) => "E_MISSING_ARTIFACT",
            Error::Json(_) | Error::Io(_) => "E_IO",
        }
    }

    /// Process exit status for this error; 2 is left for command-line usage errors.
    pub fn exit_code(&self) -> i32 {
        match self.code() {
            "E_CONFIG" => 3,
            "E_MISSING_ARTIFACT" => 4,
            "E_INPUT" => 5,
            "E_DATA" => 6,
            "E_LM" => 7,
            "E_CHECKPOINT" => 8,
            "E_SHAPE" => 9,
            "E_NON_FINITE" => 10,
            _ => 11,
        }
    }
}
