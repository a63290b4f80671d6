use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0} (corrupt latent?)")]
    NonFinite(&'static str),

    #[error("degenerate vector: {0} has zero norm")]
    DegenerateVector(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("similarity map is empty")]
    EmptyMap,

    #[error("k = {k} exceeds the prototype pool of class {class} ({pool} prototypes)")]
    KTooLarge { class: usize, k: usize, pool: usize },

    #[error("no wrong-class prototypes exist for any training image")]
    NoWrongClassPrototypes,

    #[error("input resolution mismatch: expected {expected:?}, got {got:?}")]
    Resolution {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error(
        "non-finite loss component `{component}` in stage {stage}, epoch {epoch}, step {step}"
    )]
    NonFiniteLoss {
        component: &'static str,
        stage: String,
        epoch: usize,
        step: usize,
    },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("config not found: {}", .0.display())]
    ConfigNotFound(PathBuf),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
