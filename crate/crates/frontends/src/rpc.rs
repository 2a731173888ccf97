//! Remote procedure calls addressed by the FNV-1a 64 hash of their name.
//!
//! Procedures execute inline on the flow that calls [`RpcEngine::listen`];
//! each call of `listen` serves exactly one request. Requests arriving
//! before anyone listens wait in the transport's queue.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Duration;

use hicr_core::{HicrError, InstanceId, Reply, ReplyStatus, RequestTransport};
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::fnv1a64;

pub type RpcFn = Arc<dyn Fn(&[u8]) -> Vec<u8> + Send + Sync>;

pub struct RpcEngine {
    transport: Arc<dyn RequestTransport>,
    table: Mutex<HashMap<u64, (String, RpcFn)>>,
    hasher: fn(&[u8]) -> u64,
}

impl RpcEngine {
    pub fn new(transport: Arc<dyn RequestTransport>) -> Self {
        Self::with_hasher(transport, fnv1a64)
    }

    /// Uses a different name hash. Every instance must use the same one.
    pub fn with_hasher(transport: Arc<dyn RequestTransport>, hasher: fn(&[u8]) -> u64) -> Self {
        Self { transport, table: Mutex::new(HashMap::new()), hasher }
    }

    pub fn current_instance(&self) -> InstanceId {
        self.transport.current_instance()
    }

    pub fn hash(&self, name: &str) -> u64 {
        (self.hasher)(name.as_bytes())
    }

    pub fn register<F>(&self, name: &str, f: F) -> Result<()>
    where
        F: Fn(&[u8]) -> Vec<u8> + Send + Sync + 'static,
    {
        if name.is_empty() {
            return Err(Error::InvalidConfig("empty procedure name".into()));
        }
        let h = self.hash(name);
        let mut table = self.table.lock();
        if let Some((existing, _)) = table.get(&h) {
            return Err(if existing == name {
                Error::DuplicateName(name.into())
            } else {
                Error::HashCollision { name: name.into(), existing: existing.clone() }
            });
        }
        table.insert(h, (name.to_string(), Arc::new(f)));
        Ok(())
    }

    /// Registered names, sorted.
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.table.lock().values().map(|(n, _)| n.clone()).collect();
        v.sort();
        v
    }

    /// Blocks until one request for a registered procedure has been served.
    /// Requests for unknown names get an error reply and do not count.
    pub fn listen(&self) -> Result<usize> {
        self.listen_timeout(None)
    }

    pub fn listen_timeout(&self, timeout: Option<Duration>) -> Result<usize> {
        if self.table.lock().is_empty() {
            return Err(Error::InvalidConfig("no procedures registered".into()));
        }
        loop {
            let req = self.transport.next_request(timeout)?;
            let entry = self.table.lock().get(&req.name_hash).cloned();
            let Some((name, f)) = entry else {
                log::debug!("request for unknown procedure {:#018x} from {}", req.name_hash, req.source);
                req.respond(Reply { status: ReplyStatus::UnknownName, payload: Vec::new() })?;
                continue;
            };
            let reply = match catch_unwind(AssertUnwindSafe(|| f(&req.argument))) {
                Ok(ret) => Reply::ok(ret),
                Err(p) => {
                    let msg = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".into());
                    log::warn!("procedure {name:?} panicked: {msg}");
                    Reply { status: ReplyStatus::Failed, payload: msg.into_bytes() }
                }
            };
            req.respond(reply)?;
            return Ok(1);
        }
    }

    /// Runs `name` on `target` and waits for its return value.
    pub fn request(&self, target: InstanceId, name: &str, argument: &[u8]) -> Result<Vec<u8>> {
        let reply = self.transport.request(target, self.hash(name), argument).map_err(|e| match e {
            HicrError::PeerUnreachable(m) => Error::PeerUnreachable(m),
            HicrError::Timeout(_) => Error::RpcTimeout(name.into()),
            e => e.into(),
        })?;
        match reply.status {
            ReplyStatus::Ok => Ok(reply.payload),
            ReplyStatus::UnknownName => Err(Error::RpcUnknownName(name.into())),
            ReplyStatus::Failed => {
                Err(Error::RpcFailed { name: name.into(), reason: String::from_utf8_lossy(&reply.payload).into() })
            }
        }
    }
}
