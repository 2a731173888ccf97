//! Backend-agnostic model of a runtime support layer.
//!
//! Hardware is described by a [`Topology`] of devices holding memory spaces
//! and compute resources. Data moves between [`LocalMemorySlot`]s and
//! collectively exchanged [`GlobalMemorySlot`]s through a
//! [`CommunicationManager`]; functions run as [`ExecutionState`]s on
//! [`ProcessingUnit`]s through a [`ComputeManager`]. Backends implement the
//! manager traits; applications only see the traits.

pub mod compute;
pub mod error;
pub mod instance;
pub mod managers;
pub mod memory;
pub mod topology;
pub mod transport;

pub use compute::{
    Argument, ExecutionLifecycle, ExecutionState, ExecutionUnit, NoSuspend, ProcessingLifecycle, ProcessingUnit,
    Suspender, UnitBody,
};
pub use error::{HicrError, Result};
pub use instance::{Instance, InstanceId, InstanceState, InstanceTemplate};
pub use managers::{CommunicationManager, ComputeManager, InstanceManager, Managers, MemoryManager, TopologyManager};
pub use memory::{
    classify_memcpy, validate_slot_range, GlobalMemorySlot, LocalMemorySlot, MemcpyDirection, SlotKind, SlotOrigin,
    SlotRef, Storage, TransferHandle,
};
pub use topology::{ComputeResource, Device, MemorySpace, Topology};
pub use transport::{IncomingRequest, InlineHandler, Reply, ReplyStatus, RequestTransport};

/// Validates that `state` may move to `to` and records the transition.
pub fn transition_execution_state(state: &ExecutionState, to: ExecutionLifecycle) -> Result<()> {
    state.transition(to)
}
