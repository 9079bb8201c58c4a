use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid window: zero overlap energy at position {position}")]
    InvalidWindow { position: usize },

    #[error("window is not tight: max deviation {deviation:e} from unit overlap energy")]
    NotTight { deviation: f64 },

    #[error("undefined {0}: reference or scale is zero")]
    Undefined(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value encountered: {0}")]
    Poisoned(String),

    #[error("network is not certified: layer {layer} carries no norm certificate")]
    Uncertified { layer: usize },

    #[error("no finite Lipschitz certificate exists for {0}")]
    Unbounded(&'static str),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("check failed: {0}")]
    Mismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
