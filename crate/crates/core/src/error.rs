use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown selector `{0}`")]
    UnknownSelector(String),
    #[error("invalid module path `{0}`")]
    InvalidPath(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("instance too large for enumeration: {0} alignments")]
    TooManyAlignments(u128),
    #[error("domain `{0}` is already registered")]
    DuplicateDomain(String),
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("site conflict at `{0}`")]
    SiteConflict(String),
    #[error("nothing trainable for domain `{0}`")]
    NothingTrainable(String),
    #[error("corpus domain `{found}` does not match plan domain `{expected}`")]
    DomainMismatch { expected: String, found: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("corrupt bundle header: {0}")]
    CorruptHeader(String),
    #[error("unsupported bundle format version {0}")]
    UnsupportedVersion(u32),
    #[error("bundle shape mismatch for `{key}`: expected {expected:?}, found {found:?}")]
    BundleShape { key: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("fingerprint mismatch: bundle {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("corpus record mismatch: {0}")]
    Corpus(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, used in single-line JSON error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Tensor(_) => "tensor",
            Self::Config(_) => "config",
            Self::UnknownSelector(_) => "unknown_selector",
            Self::InvalidPath(_) => "invalid_path",
            Self::MissingParam(_) => "missing_param",
            Self::TokenOutOfRange { .. } => "token_out_of_range",
            Self::TooManyAlignments(_) => "too_many_alignments",
            Self::DuplicateDomain(_) => "duplicate_domain",
            Self::UnknownDomain(_) => "unknown_domain",
            Self::SiteConflict(_) => "site_conflict",
            Self::NothingTrainable(_) => "nothing_trainable",
            Self::DomainMismatch { .. } => "domain_mismatch",
            Self::Diverged { .. } => "diverged",
            Self::CorruptHeader(_) => "corrupt_header",
            Self::UnsupportedVersion(_) => "unsupported_version",
            Self::BundleShape { .. } => "shape_mismatch",
            Self::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Self::Corpus(_) => "corpus",
            Self::Json(_) => "json",
            Self::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
