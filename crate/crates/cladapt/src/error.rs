use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto process exit
/// codes (see `cli::exit_code`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("gain condition violated: {0}")]
    GainCondition(String),

    #[error("numerical integrity failure: {0}")]
    Numerics(String),

    #[error("simulation diverged at t = {t}: {msg}")]
    Divergence { t: f64, msg: String },

    #[error("state error: {0}")]
    State(String),

    #[error("certification check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(name: &'static str, it: impl IntoIterator<Item = f64>) -> Result<()> {
    if it.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(name))
    }
}
