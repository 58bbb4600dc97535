use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("affine map is singular (|det| = {det:e})")]
    SingularMap { det: f64 },
    #[error("contrast factor {0} outside [0.5, 1.5]")]
    BadFactor(f64),
    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),
    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),
    #[error("bounding-box diagonal must be positive, got {0}")]
    BadDiagonal(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("second eigenvalue {0:e} too small for anisotropic normalization")]
    ZeroWidth(f64),
    #[error("crop window size must be positive, got {0}")]
    BadWindow(f64),
    #[error("jitter fraction {0} outside [0, 1]")]
    BadPct(f64),
    #[error("expected a {expected_w}x{expected_h} image, got {got_w}x{got_h}")]
    BadInputSize {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("invalid augmentation spec: {0}")]
    BadAugmentSpec(String),
    #[error("subject `{0}` has no images")]
    EmptySubject(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("class {0} has no center")]
    UnknownClass(usize),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    BadTrainConfig(String),
    #[error("BSIF filter bank not found: {0}")]
    MissingFilterBank(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("metric mismatch: {0}")]
    MetricMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("probe `{0}` has fewer than 2 gallery entries")]
    TooFewGallery(String),
    #[error("score matrices do not share probe/gallery ids")]
    IdMismatch,
    #[error("score matrix is not min-max normalized")]
    NotNormalized,
    #[error("image id `{0}` has no identity label")]
    UnlabeledId(String),
    #[error("no gallery entries")]
    NoGallery,
    #[error("need both genuine and impostor pairs ({genuine} genuine, {impostor} impostor)")]
    OneClassOnly { genuine: usize, impostor: usize },
    #[error("too few images: {0}")]
    TooFewImages(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("protocol configuration error: {0}")]
    ProtocolConfig(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: u64,
        message: String,
    },
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("stage `{stage}` failed: {cause}")]
    StageFailure {
        stage: String,
        #[source]
        cause: Box<Error>,
    },
    #[error("container format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(line: u64, column: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::StageFailure {
            stage: stage.to_string(),
            cause: Box::new(self),
        }
    }
}
