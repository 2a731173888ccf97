//! Publish and retrieve byte blocks without pre-exchanged buffers.
//!
//! A publisher exposes a slot and records it under a fresh identifier.
//! Any instance holding the identifier resolves it to a handle through a
//! request to the publisher, then pulls the bytes with a global-to-local
//! copy. Bytes are undefined if the publisher modifies the slot after
//! publishing it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use hicr_core::{
    CommunicationManager, HicrError, InstanceId, LocalMemorySlot, Reply, ReplyStatus, RequestTransport, TransferHandle,
};
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::fnv1a64;

/// Space reserved for backend slot tokens in a serialized handle.
pub const HANDLE_TOKEN_CAPACITY: usize = 128;
pub const SERIALIZED_HANDLE_LEN: usize = 8 + 8 + 8 + 2 + HANDLE_TOKEN_CAPACITY;

/// `(publisher low 32 bits << 32) | per-publisher sequence`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DataObjectId(pub u64);

impl DataObjectId {
    pub fn new(publisher: InstanceId, sequence: u32) -> Self {
        Self(((publisher.0 & 0xffff_ffff) << 32) | u64::from(sequence))
    }

    pub fn publisher(&self) -> InstanceId {
        InstanceId(self.0 >> 32)
    }

    pub fn sequence(&self) -> u32 {
        self.0 as u32
    }
}

/// Metadata needed to fetch a published object. Holds no payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataObjectHandle {
    pub id: DataObjectId,
    pub owner: InstanceId,
    pub size: u64,
    pub token: Vec<u8>,
}

impl DataObjectHandle {
    /// Fixed-length encoding: `id | owner | size | tokenLen:u16 | token (zero padded)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        assert!(self.token.len() <= HANDLE_TOKEN_CAPACITY, "slot token exceeds handle capacity");
        let mut v = Vec::with_capacity(SERIALIZED_HANDLE_LEN);
        v.extend_from_slice(&self.id.0.to_le_bytes());
        v.extend_from_slice(&self.owner.0.to_le_bytes());
        v.extend_from_slice(&self.size.to_le_bytes());
        v.extend_from_slice(&(self.token.len() as u16).to_le_bytes());
        v.extend_from_slice(&self.token);
        v.resize(SERIALIZED_HANDLE_LEN, 0);
        v
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != SERIALIZED_HANDLE_LEN {
            return Err(HicrError::Protocol(format!("handle of {} bytes", b.len())).into());
        }
        let u = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"));
        let len = u16::from_le_bytes([b[24], b[25]]) as usize;
        if len > HANDLE_TOKEN_CAPACITY {
            return Err(HicrError::Protocol("handle token length".into()).into());
        }
        Ok(Self { id: DataObjectId(u(0)), owner: InstanceId(u(8)), size: u(16), token: b[26..26 + len].to_vec() })
    }
}

struct Exposed {
    slot: LocalMemorySlot,
    token: Vec<u8>,
    refs: usize,
}

#[derive(Default)]
struct Registry {
    objects: HashMap<u64, (u64, u64)>,
    /// Keyed by local slot id; one exposure per slot however often published.
    slots: HashMap<u64, Exposed>,
}

impl Registry {
    fn handle(&self, me: InstanceId, id: u64) -> Option<DataObjectHandle> {
        let (slot_id, size) = *self.objects.get(&id)?;
        let token = self.slots.get(&slot_id)?.token.clone();
        Some(DataObjectHandle { id: DataObjectId(id), owner: me, size, token })
    }
}

/// Per-instance registry of published objects. Objects travel under `tag`;
/// all instances sharing objects use the same tag.
pub struct DataObjectStore {
    comm: Arc<dyn CommunicationManager>,
    transport: Arc<dyn RequestTransport>,
    tag: u64,
    me: InstanceId,
    lookup_hash: u64,
    registry: Arc<Mutex<Registry>>,
    next_seq: AtomicU64,
    in_flight: Mutex<Vec<DataObjectHandle>>,
}

fn lookup_hash(tag: u64) -> u64 {
    fnv1a64(format!("hicr.dataobject.lookup/{tag}").as_bytes())
}

impl DataObjectStore {
    pub fn new(comm: Arc<dyn CommunicationManager>, transport: Arc<dyn RequestTransport>, tag: u64) -> Self {
        let me = transport.current_instance();
        let registry: Arc<Mutex<Registry>> = Arc::default();
        let reg = registry.clone();
        let hash = lookup_hash(tag);
        transport.set_inline_handler(
            hash,
            Arc::new(move |_, arg| {
                let found = <[u8; 8]>::try_from(arg).ok().and_then(|b| reg.lock().handle(me, u64::from_le_bytes(b)));
                match found {
                    Some(h) => Reply::ok(h.to_bytes()),
                    None => Reply { status: ReplyStatus::Failed, payload: b"unknown object".to_vec() },
                }
            }),
        );
        Self {
            comm,
            transport,
            tag,
            me,
            lookup_hash: hash,
            registry,
            next_seq: AtomicU64::new(0),
            in_flight: Mutex::new(Vec::new()),
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    /// Makes `slot` retrievable by any instance. The slot stays pinned until
    /// every identifier referring to it is unpublished.
    pub fn publish(&self, slot: &LocalMemorySlot) -> Result<DataObjectId> {
        slot.ensure_valid()?;
        let seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
        let seq = u32::try_from(seq).map_err(|_| Error::InvalidConfig("data object sequence exhausted".into()))?;
        let id = DataObjectId::new(self.me, seq);
        let mut reg = self.registry.lock();
        if let Some(e) = reg.slots.get_mut(&slot.id()) {
            e.refs += 1;
        } else {
            let token = self.comm.expose_slot(slot)?;
            if token.len() > HANDLE_TOKEN_CAPACITY {
                let _ = self.comm.revoke_slot(&token);
                return Err(HicrError::Protocol(format!("slot token of {} bytes", token.len())).into());
            }
            slot.pin();
            reg.slots.insert(slot.id(), Exposed { slot: slot.clone(), token, refs: 1 });
        }
        reg.objects.insert(id.0, (slot.id(), slot.size()));
        Ok(id)
    }

    pub fn get_handle(&self, id: DataObjectId) -> Result<DataObjectHandle> {
        let owner = id.publisher();
        if owner == InstanceId(self.me.0 & 0xffff_ffff) {
            return self.registry.lock().handle(self.me, id.0).ok_or(Error::UnknownObject(id.0));
        }
        let reply = self.transport.request(owner, self.lookup_hash, &id.0.to_le_bytes()).map_err(|e| match e {
            HicrError::PeerUnreachable(m) => Error::PeerUnreachable(m),
            e => e.into(),
        })?;
        match reply.status {
            ReplyStatus::Ok => DataObjectHandle::from_bytes(&reply.payload),
            ReplyStatus::UnknownName | ReplyStatus::Failed => Err(Error::UnknownObject(id.0)),
        }
    }

    /// Starts copying the object into the front of `dst`; complete after
    /// [`fence_objects`](Self::fence_objects).
    pub fn get(&self, handle: &DataObjectHandle, dst: &LocalMemorySlot) -> Result<TransferHandle> {
        if dst.size() < handle.size {
            return Err(Error::SizeMismatch { expected: handle.size, found: dst.size() });
        }
        let g =
            self.comm.import_global_slot(self.tag, handle.id.0, handle.owner, &handle.token).map_err(|e| match e {
                HicrError::InvalidSlot(_) => Error::UnknownObject(handle.id.0),
                e => e.into(),
            })?;
        let t = self.comm.memcpy(dst.into(), 0, (&g).into(), 0, handle.size).map_err(|e| match e {
            HicrError::InvalidSlot(_) => Error::UnknownObject(handle.id.0),
            e => e.into(),
        })?;
        self.in_flight.lock().push(handle.clone());
        Ok(t)
    }

    /// Completes all gets started since the previous fence.
    pub fn fence_objects(&self) -> Result<()> {
        let pending = std::mem::take(&mut *self.in_flight.lock());
        match self.comm.fence(self.tag) {
            Ok(()) => Ok(()),
            Err(e @ HicrError::RemoteRejected(_)) => {
                for h in &pending {
                    if let Err(Error::UnknownObject(id)) = self.get_handle(h.id) {
                        return Err(Error::UnknownObject(id));
                    }
                }
                Err(e.into())
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn unpublish(&self, id: DataObjectId) -> Result<()> {
        let mut reg = self.registry.lock();
        let (slot_id, _) = reg.objects.remove(&id.0).ok_or(Error::UnknownObject(id.0))?;
        let e = reg.slots.get_mut(&slot_id).expect("published slot is registered");
        e.refs -= 1;
        if e.refs == 0 {
            let e = reg.slots.remove(&slot_id).expect("present");
            drop(reg);
            e.slot.unpin();
            self.comm.revoke_slot(&e.token)?;
        }
        Ok(())
    }

    /// Identifiers currently published by this instance.
    pub fn published(&self) -> usize {
        self.registry.lock().objects.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_layout() {
        let id = DataObjectId::new(InstanceId(3), 7);
        assert_eq!(id.0, (3 << 32) | 7);
        assert_eq!((id.publisher(), id.sequence()), (InstanceId(3), 7));
    }

    #[test]
    fn handle_encoding_is_fixed_length() {
        for n in [0, 8, 40, HANDLE_TOKEN_CAPACITY] {
            let h = DataObjectHandle { id: DataObjectId(9), owner: InstanceId(2), size: 1 << 40, token: vec![7; n] };
            let b = h.to_bytes();
            assert_eq!(b.len(), SERIALIZED_HANDLE_LEN);
            assert_eq!(DataObjectHandle::from_bytes(&b).unwrap(), h);
        }
        assert!(DataObjectHandle::from_bytes(&[0; 5]).is_err());
    }
}
