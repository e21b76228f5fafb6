use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot place {needed} entities on a {side}x{side} grid")]
    GridTooSmall { needed: usize, side: usize },
    #[error("illegal action {action} for agent {agent} (action space {n_actions})")]
    IllegalAction { agent: usize, action: usize, n_actions: usize },
    #[error("episode already finished")]
    EpisodeDone,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("sequence of length {len} exceeds positional capacity {capacity}")]
    TooLong { len: usize, capacity: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
