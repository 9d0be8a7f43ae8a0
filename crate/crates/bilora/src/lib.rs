//! Detecting synthetic images by captioning them.
//!
//! The pieces, bottom to top:
//!
//! * [`tensor`]: a small reverse-mode autodiff engine over dense row-major
//!   tensors, with a fixed set of differentiable primitives and a
//!   finite-difference gradient checker.
//! * [`lora`]: low-rank adapters (`W + (alpha/r) * B * A`) that attach to
//!   frozen projection matrices, plus the parameter-budget arithmetic.
//! * [`model`]: a tiny encoder/bridge/decoder captioner over 32x32 images.
//!   Classification is caption emission: the first generated word is read
//!   back as "real" or "fake".
//! * [`data`]: a deterministic synthetic corpus. Real images are smooth
//!   procedural textures; each fake family adds a low-amplitude periodic or
//!   checkerboard artifact on top of the same texture process.
//! * [`degrade`]: test-time image degradations (2x downscale, Gaussian blur,
//!   baseline JPEG round trip) used to probe detector robustness.
//! * [`train`]: Adam, the two-stage schedule (full pretraining, then
//!   adapter-only fine-tuning) and a binary checkpoint format.
//! * [`eval`]: accuracy/F1 scoring and the cross-family evaluation matrix
//!   with CSV and Markdown emission.
//! * [`cli`]: the `bilora` command line driving all of the above.
//!
//! All floating-point work in the shipped pipeline is `f64`; the math lives
//! in generic code over [`scalar::Scalar`] and the crate root pins the
//! concrete aliases used everywhere else.

pub mod cli;
pub mod data;
pub mod degrade;
pub mod eval;
pub mod lora;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

mod threads;

pub use threads::thread_pool;

/// Concrete scalar used by the shipped pipeline.
pub type Elem = f64;
/// Tensor over the pipeline scalar.
pub type Tensor = tensor::Tensor<Elem>;
/// Recording graph over the pipeline scalar.
pub type Graph = tensor::Graph<Elem>;
/// Image buffer over the pipeline scalar.
pub type Image = data::ImageBuf<Elem>;
/// Adapter over the pipeline scalar.
pub type LoraAdapter = lora::LoraAdapter<Elem>;

/// Caption model on the default scalar.
pub type CaptionModel = model::CaptionModel<Elem>;

// ── Errors ──────────────────────────────────────────────────────────────

/// Crate-wide error type. Variants are coarse on purpose: callers mostly
/// need to distinguish "your inputs are wrong" (shape, config, contract)
/// from "the run went bad" (io, numeric failure, corrupt file).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands cannot be combined, e.g. matmul over [2,3] and [2,3].
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation precondition failed (bad axis, non-scalar loss, odd
    /// extent for pooling, index out of range, ...).
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },

    /// Bad configuration value or inconsistent config combination.
    #[error("config: {0}")]
    Config(String),

    /// Non-finite value where a finite one is required. The message carries
    /// coordinates (epoch/batch, parameter name) when known.
    #[error("numeric: {0}")]
    Numeric(String),

    /// A manifest record failed validation; `index` is the zero-based line.
    #[error("manifest record {index}: {reason}")]
    Manifest { index: usize, reason: String },

    /// Generated dataset failed one of its own sanity checks.
    #[error("dataset: {0}")]
    Dataset(String),

    /// Checkpoint does not start with the expected magic bytes.
    #[error("checkpoint: bad magic (not a checkpoint file?)")]
    BadMagic,

    /// Checkpoint is from an unknown format revision.
    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),

    /// Checkpoint ended mid-record.
    #[error("checkpoint: truncated file")]
    Truncated,

    /// Checkpoint tensors do not line up with the model being loaded.
    #[error("checkpoint: {0}")]
    CheckpointMismatch(String),

    /// Metrics were requested over zero records.
    #[error("evaluation over an empty record set")]
    EmptyEvaluation,

    /// Malformed or undecodable JPEG stream.
    #[error("jpeg: {0}")]
    Jpeg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image file: {0}")]
    Png(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Contract {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
