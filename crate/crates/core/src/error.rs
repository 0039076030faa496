use thiserror::Error;

use crate::conditioning::cache::CacheError;
use crate::config::ConfigError;
use crate::domain::DomainId;
use crate::trainer::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("keypoint {index} at ({x}, {y}) lies outside the {resolution}x{resolution} image")]
    KeypointOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        resolution: usize,
    },
    #[error("modality `{modality}` expects {expected} channels but got {found}")]
    ChannelCount {
        modality: String,
        expected: usize,
        found: usize,
    },
    #[error("label {label} at pixel {pixel} is not below the class count {classes}")]
    LabelOutOfRange {
        label: u32,
        pixel: usize,
        classes: usize,
    },
    #[error("non-finite value at pixel {pixel} of `{what}`")]
    NonFinite { what: String, pixel: usize },
    #[error("invalid modality manifest: {0}")]
    Manifest(String),
    #[error("shape mismatch in {context}: expected {expected}, got {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },
    #[error("unregistered domain `{0}`")]
    UnknownDomain(DomainId),
    #[error("domain `{0}` is already registered")]
    DuplicateDomain(DomainId),
    #[error(
        "content domain `{content}` differs from style domain `{style}`; use translate for cross-domain synthesis"
    )]
    DomainMismatch { content: DomainId, style: DomainId },
    #[error("translate needs a style exemplar from another domain, both are `{0}`")]
    SameDomain(DomainId),
    #[error("content source `{content}` differs from style source `{style}` during training")]
    CrossSourceSynthesis { content: String, style: String },
    #[error("feature probe has {taps} taps but {weights} layer weights were given")]
    WeightCount { taps: usize, weights: usize },
    #[error("injection {index} requested but the generator has {count}")]
    InjectionIndex { index: usize, count: usize },
    #[error("variant {variant} cannot use this manifest: {reason}")]
    VariantManifest { variant: String, reason: String },
    #[error("non-finite loss at step {step} for domain `{domain}`: {diagnostic}")]
    NonFiniteLoss {
        step: u64,
        domain: DomainId,
        diagnostic: String,
    },
    #[error("need at least {needed} {what}, got {found}")]
    TooFew {
        what: String,
        needed: usize,
        found: usize,
    },
    #[error("matrix square root failed: {0}")]
    MatrixSqrt(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context: context.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
