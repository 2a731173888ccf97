use hicr_core::HicrError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] HicrError),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("operation not allowed for this endpoint role")]
    WrongRole,

    #[error("message of {found} bytes, channel carries {expected}")]
    SizeMismatch { expected: u64, found: u64 },

    #[error("channel is empty")]
    Empty,

    #[error("channel configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("unknown data object {0:#018x}")]
    UnknownObject(u64),

    #[error("remote procedure {0:?} already registered")]
    DuplicateName(String),

    #[error("remote procedure {name:?} collides with {existing:?}")]
    HashCollision { name: String, existing: String },

    #[error("no remote procedure {0:?} on the target")]
    RpcUnknownName(String),

    #[error("remote procedure {name:?} failed: {reason}")]
    RpcFailed { name: String, reason: String },

    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),

    #[error("remote procedure {0:?} timed out")]
    RpcTimeout(String),

    #[error("runtime already started")]
    AlreadyStarted,

    #[error("runtime not started")]
    NotStarted,

    #[error("runtime is still running")]
    StillRunning,

    #[error("{0} tasks still suspended")]
    TasksPending(usize),

    #[error("i/o failure: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
