use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Domain errors. `code()` gives the stable machine-readable name used by
/// the HTTP service and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}, column {column}: cannot parse {value:?} as a number")]
    NonNumericCell {
        line: usize,
        column: usize,
        value: String,
    },
    #[error("line {line}, column {column}: negative or non-finite expression value {value}")]
    NegativeValue {
        line: usize,
        column: usize,
        value: String,
    },
    #[error("duplicate identifier {0:?}")]
    DuplicateId(String),
    #[error("matrix has no cells or no genes")]
    EmptyMatrix,
    #[error("header must start with `cell_id`")]
    BadHeader,
    #[error("matrix is already normalized")]
    AlreadyNormalized,
    #[error("matrix must be normalized first")]
    NotNormalized,

    #[error("logits contain non-finite values")]
    NonFiniteLogits,
    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("need at least {needed} cells, got {got}")]
    TooFewCells { needed: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("region is empty")]
    EmptyRegion,
    #[error("unknown gene {0:?}")]
    UnknownGene(String),
    #[error("unknown cell {0:?}")]
    UnknownCell(String),

    #[error("empty set")]
    EmptySet,
    #[error("length mismatch: {0} values vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("all values are equal")]
    DegenerateValues,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("positive and negative regions overlap")]
    OverlappingRegions,
    #[error("biomarker has no genes")]
    EmptyBiomarker,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("class {0} missing from training split")]
    MissingClassInTrain(usize),
    #[error("degenerate clusters: {0}")]
    DegenerateClusters(String),

    #[error("unsupported model file version {0:?}")]
    UnsupportedVersion(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::RaggedRow { .. } => "RaggedRow",
            Error::NonNumericCell { .. } => "NonNumericCell",
            Error::NegativeValue { .. } => "NegativeValue",
            Error::DuplicateId(_) => "DuplicateId",
            Error::EmptyMatrix => "EmptyMatrix",
            Error::BadHeader => "BadHeader",
            Error::AlreadyNormalized => "AlreadyNormalized",
            Error::NotNormalized => "NotNormalized",
            Error::NonFiniteLogits => "NonFiniteLogits",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::TooFewCells { .. } => "TooFewCells",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::EmptyRegion => "EmptyRegion",
            Error::UnknownGene(_) => "UnknownGene",
            Error::UnknownCell(_) => "UnknownCell",
            Error::EmptySet => "EmptySet",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::DegenerateValues => "DegenerateValues",
            Error::SingleClass => "SingleClass",
            Error::OverlappingRegions => "OverlappingRegions",
            Error::EmptyBiomarker => "EmptyBiomarker",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::MissingClassInTrain(_) => "MissingClassInTrain",
            Error::DegenerateClusters(_) => "DegenerateClusters",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}
