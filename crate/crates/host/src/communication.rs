//! Direct-copy communication within one instance.

use std::collections::{BTreeMap, HashMap, HashSet};

use hicr_core::{
    classify_memcpy, validate_slot_range, CommunicationManager, GlobalMemorySlot, HicrError, InstanceId,
    LocalMemorySlot, MemcpyDirection, Result, SlotRef, Storage, TransferHandle,
};
use parking_lot::Mutex;

#[derive(Default)]
struct Counters {
    initiated: u64,
    completed: u64,
}

#[derive(Default)]
struct CommState {
    sequence: u64,
    local: Counters,
    tagged: HashMap<u64, Counters>,
    tables: HashMap<u64, BTreeMap<u64, GlobalMemorySlot>>,
    exposed: HashMap<u64, LocalMemorySlot>,
}

/// Copies are carried out at initiation; fences only check the counters.
/// Global slots are supported for the single instance this manager serves.
pub struct HostCommunicationManager {
    instance: InstanceId,
    state: Mutex<CommState>,
}

impl Default for HostCommunicationManager {
    fn default() -> Self {
        Self::new(InstanceId(0))
    }
}

impl HostCommunicationManager {
    pub fn new(instance: InstanceId) -> Self {
        Self { instance, state: Mutex::new(CommState::default()) }
    }

    fn local_of<'a>(&self, g: &'a GlobalMemorySlot) -> Result<&'a LocalMemorySlot> {
        match (&g.local, g.owner == self.instance) {
            (Some(l), true) => Ok(l),
            _ => Err(HicrError::UnsupportedSpacePair),
        }
    }
}

/// Copies between two local slots after range validation.
pub fn copy_local(dst: &LocalMemorySlot, dst_off: u64, src: &LocalMemorySlot, src_off: u64, size: u64) -> Result<()> {
    validate_slot_range(SlotRef::Local(dst), dst_off, size)?;
    validate_slot_range(SlotRef::Local(src), src_off, size)?;
    Storage::copy(dst.storage(), dst_off as usize, src.storage(), src_off as usize, size as usize);
    Ok(())
}

impl CommunicationManager for HostCommunicationManager {
    fn memcpy(
        &self,
        dst: SlotRef<'_>,
        dst_offset: u64,
        src: SlotRef<'_>,
        src_offset: u64,
        size: u64,
    ) -> Result<TransferHandle> {
        let direction = classify_memcpy(dst.kind(), src.kind())?;
        validate_slot_range(dst, dst_offset, size)?;
        validate_slot_range(src, src_offset, size)?;
        let (d, s, tag) = match (direction, dst, src) {
            (MemcpyDirection::LocalToLocal, SlotRef::Local(d), SlotRef::Local(s)) => (d, s, None),
            (MemcpyDirection::LocalToGlobal, SlotRef::Global(g), SlotRef::Local(s)) => {
                (self.local_of(g)?, s, Some(g.tag))
            }
            (MemcpyDirection::GlobalToLocal, SlotRef::Local(d), SlotRef::Global(g)) => {
                (d, self.local_of(g)?, Some(g.tag))
            }
            _ => unreachable!("classify_memcpy covers all pairings"),
        };
        let mut st = self.state.lock();
        st.sequence += 1;
        let sequence = st.sequence;
        let counters = match tag {
            None => &mut st.local,
            Some(t) => st.tagged.entry(t).or_default(),
        };
        counters.initiated += 1;
        copy_local(d, dst_offset, s, src_offset, size)?;
        counters.completed += 1;
        Ok(TransferHandle { tag, sequence })
    }

    fn fence(&self, tag: u64) -> Result<()> {
        let st = self.state.lock();
        if let Some(c) = st.tagged.get(&tag) {
            debug_assert_eq!(c.initiated, c.completed);
        }
        Ok(())
    }

    fn fence_local(&self) -> Result<()> {
        let st = self.state.lock();
        debug_assert_eq!(st.local.initiated, st.local.completed);
        Ok(())
    }

    fn exchange_global_slots(
        &self,
        tag: u64,
        contributions: &[(u64, LocalMemorySlot)],
    ) -> Result<Vec<GlobalMemorySlot>> {
        let mut seen = HashSet::new();
        for (key, slot) in contributions {
            slot.ensure_valid()?;
            if !seen.insert(*key) {
                return Err(HicrError::DuplicateKey { tag, key: *key });
            }
        }
        let mut st = self.state.lock();
        let table = st.tables.entry(tag).or_default();
        if let Some((key, _)) = contributions.iter().find(|(k, _)| table.contains_key(k)) {
            return Err(HicrError::DuplicateKey { tag, key: *key });
        }
        let mut out = Vec::with_capacity(contributions.len());
        for (key, slot) in contributions {
            let g = GlobalMemorySlot {
                tag,
                key: *key,
                owner: self.instance,
                local: Some(slot.clone()),
                size: slot.size(),
                remote_token: slot.id().to_le_bytes().to_vec(),
            };
            table.insert(*key, g.clone());
            out.push(g);
        }
        out.sort_by_key(|g| g.key);
        Ok(out)
    }

    fn get_global_slot(&self, tag: u64, key: u64) -> Result<GlobalMemorySlot> {
        self.state.lock().tables.get(&tag).and_then(|t| t.get(&key)).cloned().ok_or(HicrError::NotFound { tag, key })
    }

    fn expose_slot(&self, slot: &LocalMemorySlot) -> Result<Vec<u8>> {
        slot.ensure_valid()?;
        self.state.lock().exposed.insert(slot.id(), slot.clone());
        Ok(slot.id().to_le_bytes().to_vec())
    }

    fn revoke_slot(&self, token: &[u8]) -> Result<()> {
        let id = token_id(token)?;
        self.state.lock().exposed.remove(&id).map(|_| ()).ok_or(HicrError::InvalidSlot(id))
    }

    fn import_global_slot(&self, tag: u64, key: u64, owner: InstanceId, token: &[u8]) -> Result<GlobalMemorySlot> {
        if owner != self.instance {
            return Err(HicrError::UnsupportedSpacePair);
        }
        let id = token_id(token)?;
        let slot = self.state.lock().exposed.get(&id).cloned().ok_or(HicrError::InvalidSlot(id))?;
        Ok(GlobalMemorySlot { tag, key, owner, size: slot.size(), local: Some(slot), remote_token: token.to_vec() })
    }
}

fn token_id(token: &[u8]) -> Result<u64> {
    let b: [u8; 8] = token.try_into().map_err(|_| HicrError::Protocol("bad slot token".into()))?;
    Ok(u64::from_le_bytes(b))
}
