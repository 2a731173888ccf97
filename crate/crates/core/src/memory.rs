//! Local and global memory slots, and the memcpy direction rule.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard};

use crate::error::{HicrError, Result};
use crate::instance::InstanceId;
use crate::topology::MemorySpace;

/// A byte buffer that can be shared between flows of execution and written
/// by one-sided transfers while its owner keeps a handle to it.
pub struct Storage {
    bytes: Mutex<Box<[u8]>>,
}

impl Storage {
    pub fn zeroed(len: usize) -> Arc<Self> {
        Arc::new(Self { bytes: Mutex::new(vec![0u8; len].into_boxed_slice()) })
    }

    pub fn from_vec(v: Vec<u8>) -> Arc<Self> {
        Arc::new(Self { bytes: Mutex::new(v.into_boxed_slice()) })
    }

    pub fn len(&self) -> usize {
        self.bytes.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lock(&self) -> MutexGuard<'_, Box<[u8]>> {
        self.bytes.lock()
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.bytes.lock().to_vec()
    }

    /// Copies `len` bytes between two storages. Overlapping ranges of the same
    /// storage behave as if copied through an intermediate buffer.
    pub fn copy(dst: &Storage, dst_off: usize, src: &Storage, src_off: usize, len: usize) {
        if len == 0 {
            return;
        }
        if std::ptr::eq(dst, src) {
            let mut b = dst.bytes.lock();
            b.copy_within(src_off..src_off + len, dst_off);
            return;
        }
        // lock in address order so opposite copies cannot deadlock
        let (mut d, s);
        if (dst as *const Storage) < (src as *const Storage) {
            d = dst.bytes.lock();
            s = src.bytes.lock();
        } else {
            s = src.bytes.lock();
            d = dst.bytes.lock();
        }
        d[dst_off..dst_off + len].copy_from_slice(&s[src_off..src_off + len]);
    }
}

impl fmt::Debug for Storage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Storage({} bytes)", self.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOrigin {
    /// Storage owned by the memory manager.
    Allocated,
    /// Caller-owned storage recorded by the memory manager.
    Registered,
}

static NEXT_SLOT_ID: AtomicU64 = AtomicU64::new(1);

struct LocalSlotInner {
    id: u64,
    space: MemorySpace,
    size: u64,
    origin: SlotOrigin,
    valid: AtomicBool,
    pins: AtomicUsize,
    storage: Arc<Storage>,
}

/// A described buffer within the current instance. Clones share identity and
/// validity: freeing through one handle invalidates all of them.
#[derive(Clone)]
pub struct LocalMemorySlot(Arc<LocalSlotInner>);

impl LocalMemorySlot {
    /// Used by memory managers; applications go through a `MemoryManager`.
    pub fn new(space: MemorySpace, size: u64, origin: SlotOrigin, storage: Arc<Storage>) -> Self {
        debug_assert!(size as usize <= storage.len());
        Self(Arc::new(LocalSlotInner {
            id: NEXT_SLOT_ID.fetch_add(1, Ordering::Relaxed),
            space,
            size,
            origin,
            valid: AtomicBool::new(true),
            pins: AtomicUsize::new(0),
            storage,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn memory_space(&self) -> &MemorySpace {
        &self.0.space
    }

    pub fn size(&self) -> u64 {
        self.0.size
    }

    pub fn origin(&self) -> SlotOrigin {
        self.0.origin
    }

    pub fn is_valid(&self) -> bool {
        self.0.valid.load(Ordering::Acquire)
    }

    pub fn storage(&self) -> &Arc<Storage> {
        &self.0.storage
    }

    /// Marks the slot invalid. Returns false if it already was.
    pub fn invalidate(&self) -> bool {
        self.0.valid.swap(false, Ordering::AcqRel)
    }

    pub fn pin(&self) {
        self.0.pins.fetch_add(1, Ordering::AcqRel);
    }

    pub fn unpin(&self) {
        self.0.pins.fetch_sub(1, Ordering::AcqRel);
    }

    pub fn is_pinned(&self) -> bool {
        self.0.pins.load(Ordering::Acquire) > 0
    }

    pub fn ensure_valid(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(HicrError::InvalidSlot(self.id()))
        }
    }

    pub fn read(&self, offset: u64, size: u64) -> Result<Vec<u8>> {
        validate_slot_range(SlotRef::Local(self), offset, size)?;
        let b = self.0.storage.lock();
        Ok(b[offset as usize..(offset + size) as usize].to_vec())
    }

    pub fn write(&self, offset: u64, data: &[u8]) -> Result<()> {
        validate_slot_range(SlotRef::Local(self), offset, data.len() as u64)?;
        let mut b = self.0.storage.lock();
        b[offset as usize..offset as usize + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn to_vec(&self) -> Result<Vec<u8>> {
        self.read(0, self.size())
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64> {
        let b = self.read(offset, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn write_u64(&self, offset: u64, v: u64) -> Result<()> {
        self.write(offset, &v.to_le_bytes())
    }

    pub fn same_slot(&self, other: &LocalMemorySlot) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for LocalMemorySlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalMemorySlot")
            .field("id", &self.0.id)
            .field("space", &self.0.space.space_id)
            .field("size", &self.0.size)
            .field("origin", &self.0.origin)
            .field("valid", &self.is_valid())
            .finish()
    }
}

/// A slot made reachable from other instances by a collective exchange,
/// identified by `(tag, key)`.
#[derive(Clone, Debug)]
pub struct GlobalMemorySlot {
    pub tag: u64,
    pub key: u64,
    pub owner: InstanceId,
    /// Present exactly when `owner` is the current instance.
    pub local: Option<LocalMemorySlot>,
    pub size: u64,
    /// Backend-defined metadata needed to reach the slot.
    pub remote_token: Vec<u8>,
}

impl GlobalMemorySlot {
    pub fn size(&self) -> u64 {
        self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Local,
    Global,
}

/// Either side of a memcpy.
#[derive(Clone, Copy, Debug)]
pub enum SlotRef<'a> {
    Local(&'a LocalMemorySlot),
    Global(&'a GlobalMemorySlot),
}

impl SlotRef<'_> {
    pub fn kind(&self) -> SlotKind {
        match self {
            SlotRef::Local(_) => SlotKind::Local,
            SlotRef::Global(_) => SlotKind::Global,
        }
    }

    pub fn size(&self) -> u64 {
        match self {
            SlotRef::Local(s) => s.size(),
            SlotRef::Global(g) => g.size,
        }
    }
}

impl<'a> From<&'a LocalMemorySlot> for SlotRef<'a> {
    fn from(s: &'a LocalMemorySlot) -> Self {
        SlotRef::Local(s)
    }
}

impl<'a> From<&'a GlobalMemorySlot> for SlotRef<'a> {
    fn from(s: &'a GlobalMemorySlot) -> Self {
        SlotRef::Global(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemcpyDirection {
    LocalToLocal,
    LocalToGlobal,
    GlobalToLocal,
}

/// Direction of a memcpy from the kinds of its destination and source.
/// Global-to-global has no orchestrating instance and is rejected.
pub fn classify_memcpy(dst: SlotKind, src: SlotKind) -> Result<MemcpyDirection> {
    match (dst, src) {
        (SlotKind::Local, SlotKind::Local) => Ok(MemcpyDirection::LocalToLocal),
        (SlotKind::Global, SlotKind::Local) => Ok(MemcpyDirection::LocalToGlobal),
        (SlotKind::Local, SlotKind::Global) => Ok(MemcpyDirection::GlobalToLocal),
        (SlotKind::Global, SlotKind::Global) => Err(HicrError::IllegalDirection),
    }
}

/// Ok iff `offset + size` fits the slot and a local slot is still valid.
pub fn validate_slot_range(slot: SlotRef<'_>, offset: u64, size: u64) -> Result<()> {
    if let SlotRef::Local(s) = slot {
        s.ensure_valid()?;
    }
    let slot_size = slot.size();
    match offset.checked_add(size) {
        Some(end) if end <= slot_size => Ok(()),
        _ => Err(HicrError::OutOfBounds { offset, size, slot_size }),
    }
}

/// Identifies a transfer initiated by a communication manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferHandle {
    /// `None` for local transfers.
    pub tag: Option<u64>,
    pub sequence: u64,
}
