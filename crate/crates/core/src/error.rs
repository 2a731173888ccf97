use thiserror::Error;

use crate::compute::{ExecutionLifecycle, ProcessingLifecycle};

/// Errors raised by the model-level rules and by every backend implementing
/// the manager contracts.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HicrError {
    #[error("global-to-global memcpy is not permitted")]
    IllegalDirection,

    #[error("range [{offset}, {offset}+{size}) exceeds slot of {slot_size} bytes")]
    OutOfBounds { offset: u64, size: u64, slot_size: u64 },

    #[error("memory slot {0} is no longer valid")]
    InvalidSlot(u64),

    #[error("memory slot {0} is pinned by a published object")]
    SlotPinned(u64),

    #[error("illegal execution state transition {from:?} -> {to:?}")]
    IllegalTransition { from: ExecutionLifecycle, to: ExecutionLifecycle },

    #[error("illegal processing unit transition {from:?} -> {to:?}")]
    IllegalPuTransition { from: ProcessingLifecycle, to: ProcessingLifecycle },

    #[error("wrong lifecycle: {0}")]
    WrongLifecycle(String),

    #[error("malformed topology: {0}")]
    MalformedTopology(String),

    #[error("topology discovery failed: {0}")]
    DiscoveryFailure(String),

    #[error("memory space {0} is not managed by this memory manager")]
    UnknownMemorySpace(u32),

    #[error("out of memory in space {space}: {requested} bytes requested, {available} available")]
    OutOfMemory { space: u32, requested: u64, available: u64 },

    #[error("communication between these memory spaces is not supported")]
    UnsupportedSpacePair,

    #[error("operation timed out: {0}")]
    Timeout(String),

    #[error("duplicate key {key} under tag {tag}")]
    DuplicateKey { tag: u64, key: u64 },

    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),

    #[error("no global slot for tag {tag}, key {key}")]
    NotFound { tag: u64, key: u64 },

    #[error("compute resource {0} is not supported by this compute manager")]
    UnsupportedResource(u32),

    #[error("execution unit kind {found:?} not accepted (expected {expected:?})")]
    UnsupportedUnitKind { expected: String, found: String },

    #[error("instance template cannot be satisfied: {0}")]
    TemplateUnsatisfiable(String),

    #[error("failed to spawn instances: {0}")]
    SpawnFailure(String),

    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),

    #[error("bootstrap timed out: {0}")]
    BootstrapTimeout(String),

    #[error("missing environment variable {0}")]
    MissingEnvironment(String),

    #[error("remote side rejected transfer: {0}")]
    RemoteRejected(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for HicrError {
    fn from(e: std::io::Error) -> Self {
        HicrError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HicrError>;
