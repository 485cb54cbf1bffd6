use std::path::PathBuf;

/// Errors produced anywhere in the part-discovery pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("empty foreground")]
    EmptyForeground,
    #[error("empty part {part} (mass {mass:e})")]
    EmptyPart { part: usize, mass: f64 },
    #[error("contrastive requires batch >= 2, got {0}")]
    BatchTooSmall(usize),
    #[error("degenerate transform: no valid pixels remain after warping")]
    DegenerateTransform,
    #[error("no scored pixels: prediction and ground truth share no labeled location")]
    NoScoredPixels,
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("non-finite loss at step {step}: {term}")]
    NonFinite { step: usize, term: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// A TOML parse failure, attributed to the offending key when the parser
    /// points at one.
    pub(crate) fn toml(text: &str, e: &toml::de::Error) -> Self {
        let key = e
            .span()
            .and_then(|s| text.get(s))
            .map(|k| k.trim().trim_matches('"').to_string())
            .filter(|k| !k.is_empty() && !k.contains('\n'))
            .unwrap_or_else(|| "config".into());
        Error::config(key, e.message().trim().to_string())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    /// True for errors caused by the filesystem rather than by the inputs'
    /// content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Image { .. })
    }
}
