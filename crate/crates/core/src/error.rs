use std::fmt;
use std::path::PathBuf;

use crate::imaging::Rect;

/// Which model backend a request was addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Inpaint,
    Embed,
    Segment,
}

impl BackendKind {
    pub fn route(self) -> &'static str {
        match self {
            BackendKind::Inpaint => "/v1/inpaint",
            BackendKind::Embed => "/v1/embed",
            BackendKind::Segment => "/v1/segment",
        }
    }

    pub fn env_var(self) -> &'static str {
        match self {
            BackendKind::Inpaint => "INPAINT_URL",
            BackendKind::Embed => "EMBED_URL",
            BackendKind::Segment => "SEGMENT_URL",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            BackendKind::Inpaint => "inpaint",
            BackendKind::Embed => "embed",
            BackendKind::Segment => "segment",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rect {rect} does not fit inside {width}x{height}")]
    OutOfBounds { rect: Rect, width: u32, height: u32 },

    #[error("box #{index} {rect} does not fit inside {width}x{height}")]
    BoxOutOfBounds {
        index: usize,
        rect: Rect,
        width: u32,
        height: u32,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("count overflow: {0}")]
    Overflow(String),

    #[error("{backend} backend transport error: {message}")]
    Transport { backend: BackendKind, message: String },

    #[error("{backend} backend protocol error: {message}")]
    Protocol { backend: BackendKind, message: String },

    #[error("{backend} backend returned {status} ({code}): {message}")]
    Remote {
        backend: BackendKind,
        status: u16,
        code: String,
        message: String,
    },

    #[error("region {region}, variation {variation}, attempt {attempt}: {source}")]
    Generation {
        region: usize,
        variation: usize,
        attempt: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("manifest schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The backend this error originated from, if any.
    pub fn backend(&self) -> Option<BackendKind> {
        match self {
            Error::Transport { backend, .. } | Error::Protocol { backend, .. } | Error::Remote { backend, .. } => {
                Some(*backend)
            }
            Error::Generation { source, .. } => source.backend(),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
