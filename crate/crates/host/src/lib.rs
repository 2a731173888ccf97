//! Single-process backend: OS-queried or synthetic topology, heap memory
//! spaces, direct-copy communication, and two compute managers (OS threads
//! pinned to cores, and suspendable coroutines driven by OS threads).

pub mod communication;
mod compute;
pub mod coroutine;
mod driver;
pub mod instance;
pub mod memory;
pub mod thread;
pub mod topology;
pub mod transport;

use std::sync::Arc;

pub use communication::{copy_local, HostCommunicationManager};
pub use compute::PinRecord;
pub use coroutine::{coroutine_unit, yield_now, CoroutineComputeManager, COROUTINE_UNIT_KIND, DEFAULT_STACK_SIZE};
pub use driver::{pin_current_thread, PinOutcome};
pub use instance::HostInstanceManager;
pub use memory::HostMemoryManager;
pub use thread::{thread_unit, ThreadComputeManager, THREAD_UNIT_KIND};
pub use topology::{allowed_cpus, HostTopologyConfig, HostTopologyManager};
pub use transport::LoopbackTransport;

use hicr_core::{ComputeManager, Managers, Result, TopologyManager};

/// Builds a full manager set for this process around the given compute manager.
pub fn host_managers(topology: HostTopologyManager, compute: Arc<dyn ComputeManager>) -> Result<Managers> {
    let t = topology.query_topology()?;
    let topology: Arc<dyn TopologyManager> = Arc::new(topology);
    Ok(Managers {
        memory: Arc::new(HostMemoryManager::new(&t)),
        communication: Arc::new(HostCommunicationManager::default()),
        compute,
        instance: Arc::new(HostInstanceManager::new(topology.clone())),
        topology,
    })
}
