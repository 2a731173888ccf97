//! Request/response messaging between instances.
//!
//! Used by frontends that need to reach a peer without pre-exchanged
//! buffers (remote procedure calls, data object lookups). Requests whose
//! name hash has an inline handler are answered by the backend directly;
//! all others are queued until the application takes them.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use crate::error::Result;
use crate::instance::InstanceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ReplyStatus {
    Ok = 0,
    UnknownName = 1,
    Failed = 2,
}

impl ReplyStatus {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ReplyStatus::Ok),
            1 => Some(ReplyStatus::UnknownName),
            2 => Some(ReplyStatus::Failed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: ReplyStatus,
    pub payload: Vec<u8>,
}

impl Reply {
    pub fn ok(payload: Vec<u8>) -> Self {
        Self { status: ReplyStatus::Ok, payload }
    }
}

pub type Responder = Box<dyn FnOnce(Reply) -> Result<()> + Send>;

/// A queued request. Dropping it without responding leaves the caller
/// waiting until its timeout.
pub struct IncomingRequest {
    pub source: InstanceId,
    pub name_hash: u64,
    pub argument: Vec<u8>,
    responder: Responder,
}

impl IncomingRequest {
    pub fn new(source: InstanceId, name_hash: u64, argument: Vec<u8>, responder: Responder) -> Self {
        Self { source, name_hash, argument, responder }
    }

    pub fn respond(self, reply: Reply) -> Result<()> {
        (self.responder)(reply)
    }
}

impl fmt::Debug for IncomingRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IncomingRequest")
            .field("source", &self.source)
            .field("name_hash", &format_args!("{:#018x}", self.name_hash))
            .field("argument_len", &self.argument.len())
            .finish()
    }
}

pub type InlineHandler = Arc<dyn Fn(InstanceId, &[u8]) -> Reply + Send + Sync>;

pub trait RequestTransport: Send + Sync {
    fn current_instance(&self) -> InstanceId;

    /// Sends a request and blocks for the reply.
    fn request(&self, target: InstanceId, name_hash: u64, argument: &[u8]) -> Result<Reply>;

    /// Takes the oldest queued request, waiting up to `timeout` (forever if `None`).
    fn next_request(&self, timeout: Option<Duration>) -> Result<IncomingRequest>;

    fn set_inline_handler(&self, name_hash: u64, handler: InlineHandler);
}
