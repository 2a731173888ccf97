//! The five manager contracts every backend implements.
//!
//! Calls are synchronous; their effects may be asynchronous. `memcpy` and
//! `execute` return promptly, and only `fence` and `await_completion` block.
//! All managers must tolerate concurrent invocation from several flows of
//! execution.

use crate::compute::{Argument, ExecutionState, ExecutionUnit, ProcessingUnit};
use crate::error::Result;
use crate::instance::{Instance, InstanceTemplate};
use crate::memory::{GlobalMemorySlot, LocalMemorySlot, SlotRef, Storage, TransferHandle};
use crate::topology::{ComputeResource, MemorySpace, Topology};
use crate::InstanceId;

use std::sync::Arc;

pub trait TopologyManager: Send + Sync {
    fn query_topology(&self) -> Result<Topology>;
}

pub trait MemoryManager: Send + Sync {
    fn allocate(&self, space: &MemorySpace, size: u64) -> Result<LocalMemorySlot>;

    /// Records caller-owned storage as a slot. Freeing the slot does not
    /// release the storage.
    fn register_external(&self, space: &MemorySpace, storage: Arc<Storage>, size: u64) -> Result<LocalMemorySlot>;

    fn free(&self, slot: &LocalMemorySlot) -> Result<()>;

    /// Sum of live allocated slot sizes in `space`.
    fn used_bytes(&self, space: &MemorySpace) -> Result<u64>;
}

pub trait CommunicationManager: Send + Sync {
    /// Starts copying `size` bytes. Completion is only guaranteed after the
    /// matching fence: `fence_local` for local-to-local, `fence(tag)` for
    /// transfers involving a global slot of that tag.
    fn memcpy(
        &self,
        dst: SlotRef<'_>,
        dst_offset: u64,
        src: SlotRef<'_>,
        src_offset: u64,
        size: u64,
    ) -> Result<TransferHandle>;

    fn fence(&self, tag: u64) -> Result<()>;

    fn fence_local(&self) -> Result<()>;

    /// Collective: every instance calls it with the same tag. Returns the
    /// slots contributed by all instances, ordered by key.
    fn exchange_global_slots(
        &self,
        tag: u64,
        contributions: &[(u64, LocalMemorySlot)],
    ) -> Result<Vec<GlobalMemorySlot>>;

    fn get_global_slot(&self, tag: u64, key: u64) -> Result<GlobalMemorySlot>;

    /// Makes a local slot reachable without a collective and returns the
    /// token a peer needs to import it.
    fn expose_slot(&self, slot: &LocalMemorySlot) -> Result<Vec<u8>>;

    fn revoke_slot(&self, token: &[u8]) -> Result<()>;

    /// Builds a global slot from a token produced by `expose_slot` on `owner`.
    fn import_global_slot(&self, tag: u64, key: u64, owner: InstanceId, token: &[u8]) -> Result<GlobalMemorySlot>;
}

pub trait ComputeManager: Send + Sync {
    /// The execution unit kind this manager runs, e.g. `"os-thread"`.
    fn unit_kind(&self) -> &str;

    fn supports_suspension(&self) -> bool;

    fn create_processing_unit(&self, resource: &ComputeResource) -> Result<ProcessingUnit>;

    fn create_execution_state(&self, unit: &ExecutionUnit, argument: Argument) -> Result<ExecutionState>;

    fn initialize(&self, pu: &ProcessingUnit) -> Result<()>;

    /// Starts (or resumes) `state` on `pu` and returns without waiting.
    fn execute(&self, pu: &ProcessingUnit, state: &ExecutionState) -> Result<()>;

    /// Waits until the state running on `pu` finished or suspended, leaving
    /// `pu` ready again.
    fn await_completion(&self, pu: &ProcessingUnit) -> Result<()>;

    fn finalize(&self, pu: &ProcessingUnit) -> Result<()>;
}

pub trait InstanceManager: Send + Sync {
    fn get_instances(&self) -> Result<Vec<Instance>>;

    fn current_instance(&self) -> Instance;

    fn create_instances(&self, count: usize, template: &InstanceTemplate) -> Result<Vec<Instance>>;
}

/// Convenience bundle of one manager of each kind, as handed to an application.
#[derive(Clone)]
pub struct Managers {
    pub topology: Arc<dyn TopologyManager>,
    pub memory: Arc<dyn MemoryManager>,
    pub communication: Arc<dyn CommunicationManager>,
    pub compute: Arc<dyn ComputeManager>,
    pub instance: Arc<dyn InstanceManager>,
}
