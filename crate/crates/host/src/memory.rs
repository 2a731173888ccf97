//! Heap-backed memory spaces with capacity bookkeeping.

use std::collections::HashMap;
use std::sync::Arc;

use hicr_core::{HicrError, LocalMemorySlot, MemoryManager, MemorySpace, Result, SlotOrigin, Storage, Topology};
use parking_lot::Mutex;

/// Allocations beyond a space's physical size fail even though the heap could
/// oversubscribe, so the capacity of each space stays meaningful.
pub struct HostMemoryManager {
    spaces: HashMap<u32, MemorySpace>,
    used: Mutex<HashMap<u32, u64>>,
}

impl HostMemoryManager {
    pub fn new(topology: &Topology) -> Self {
        let spaces: HashMap<u32, MemorySpace> = topology.memory_spaces().map(|s| (s.space_id, s.clone())).collect();
        let used = spaces.keys().map(|&k| (k, 0)).collect();
        Self { spaces, used: Mutex::new(used) }
    }

    fn recognize(&self, space: &MemorySpace) -> Result<()> {
        match self.spaces.get(&space.space_id) {
            Some(known) if known == space => Ok(()),
            _ => Err(HicrError::UnknownMemorySpace(space.space_id)),
        }
    }
}

impl MemoryManager for HostMemoryManager {
    fn allocate(&self, space: &MemorySpace, size: u64) -> Result<LocalMemorySlot> {
        self.recognize(space)?;
        {
            let mut used = self.used.lock();
            let u = used.get_mut(&space.space_id).expect("recognized space");
            let available = space.physical_size_bytes - *u;
            if size > available {
                return Err(HicrError::OutOfMemory { space: space.space_id, requested: size, available });
            }
            *u += size;
        }
        let storage = Storage::zeroed(size as usize);
        Ok(LocalMemorySlot::new(space.clone(), size, SlotOrigin::Allocated, storage))
    }

    fn register_external(&self, space: &MemorySpace, storage: Arc<Storage>, size: u64) -> Result<LocalMemorySlot> {
        self.recognize(space)?;
        let len = storage.len() as u64;
        if size > len {
            return Err(HicrError::OutOfBounds { offset: 0, size, slot_size: len });
        }
        Ok(LocalMemorySlot::new(space.clone(), size, SlotOrigin::Registered, storage))
    }

    fn free(&self, slot: &LocalMemorySlot) -> Result<()> {
        self.recognize(slot.memory_space())?;
        if slot.is_pinned() {
            return Err(HicrError::SlotPinned(slot.id()));
        }
        if !slot.invalidate() {
            return Err(HicrError::InvalidSlot(slot.id()));
        }
        if slot.origin() == SlotOrigin::Allocated {
            let mut used = self.used.lock();
            *used.get_mut(&slot.memory_space().space_id).expect("recognized space") -= slot.size();
        }
        Ok(())
    }

    fn used_bytes(&self, space: &MemorySpace) -> Result<u64> {
        self.recognize(space)?;
        Ok(self.used.lock()[&space.space_id])
    }
}
