use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("compatibility error: {0}")]
    Compat(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: total={total} parts=(gt {gt}, bce {bce}, distill {distill})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        total: f64,
        gt: f64,
        bce: f64,
        distill: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
