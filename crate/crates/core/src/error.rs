use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the CLI
/// reports with distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("label {label} out of range for {classes} classes at position {position}")]
    LabelOutOfRange {
        label: u32,
        classes: usize,
        position: usize,
    },

    #[error("input dims {h}x{w} are not multiples of the downsample factor {factor}; pad first")]
    PaddingRequired { h: usize, w: usize, factor: usize },

    #[error("latent symbol {value} outside coder support [{lo}, {hi}]")]
    OutOfSupport { value: i32, lo: i32, hi: i32 },

    #[error("bitstream model digest {stream:#018x} does not match entropy model {model:#018x}")]
    ModelMismatch { stream: u64, model: u64 },

    #[error("corrupt bitstream: {0}")]
    CorruptStream(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value at step {step}: first offender {location}")]
    NonFinite { step: usize, location: String },

    #[error("gradient-routing audit failed at step {step}: {detail}")]
    AuditFailed { step: usize, detail: String },

    #[error("recognizer pretraining missed the quality gate: miou={miou:.4} (need >= {miou_gate}), presence_acc={presence_acc:.4} (need >= {acc_gate})")]
    PretrainGate {
        miou: f64,
        miou_gate: f64,
        presence_acc: f64,
        acc_gate: f64,
    },

    #[error("curves do not overlap in quality; BD-rate is undefined")]
    NoQualityOverlap,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("png error: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}
