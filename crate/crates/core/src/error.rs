use thiserror::Error;

/// Errors surfaced by the simulator and planner.
///
/// The CLI maps `Config` to exit code 2 and everything else to exit code 1,
/// so keep the variants stable.
#[derive(Debug, Error)]
pub enum Error {
    /// A run configuration violates a structural constraint (divisibility,
    /// rank ranges, placement feasibility).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with arguments that break its contract
    /// (shape mismatch, out-of-range rank, non-finite data).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The message-passing executor could not match a receive to a send
    /// within its step window, or found unconsumed messages at shutdown.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An independent oracle produced an unusable value (non-finite output).
    #[error("oracle failure: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
    pub fn oracle(msg: impl Into<String>) -> Self {
        Error::Oracle(msg.into())
    }
}
