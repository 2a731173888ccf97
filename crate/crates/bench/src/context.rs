//! Manager construction for a benchmark process.
//!
//! A process started by the launcher (`HICR_INSTANCE_COUNT` present) joins
//! the TCP deployment; otherwise it runs alone on the host backend. Benchmarks
//! only see the [`Context`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use hicr_core::{
    CommunicationManager, ComputeManager, ComputeResource, InstanceManager, MemoryManager, MemorySpace, SlotRef,
    Topology, TopologyManager,
};
use hicr_host::{
    CoroutineComputeManager, HostCommunicationManager, HostInstanceManager, HostMemoryManager, HostTopologyManager,
    ThreadComputeManager,
};
use hicr_net::config::ENV_INSTANCE_COUNT;
use hicr_net::NetNode;

use crate::error::Result;

const BARRIER_TAG: u64 = u64::MAX;
const GATHER_TAG_BASE: u64 = 1 << 48;

/// Which compute manager runs execution units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ComputeKind {
    Threads,
    Coroutines,
}

impl ComputeKind {
    /// Units are not pinned: benchmarks may ask for more workers than cores.
    pub fn manager(self) -> Arc<dyn ComputeManager> {
        match self {
            ComputeKind::Threads => Arc::new(ThreadComputeManager::new().without_pinning()),
            ComputeKind::Coroutines => Arc::new(CoroutineComputeManager::new().without_pinning()),
        }
    }
}

/// `n` logical worker resources.
pub fn worker_resources(n: usize) -> Vec<ComputeResource> {
    (0..n).map(|i| ComputeResource::new(i as u32, "core", None)).collect()
}

pub struct Context {
    pub rank: usize,
    pub size: usize,
    pub topology: Topology,
    pub space: MemorySpace,
    pub comm: Arc<dyn CommunicationManager>,
    pub mem: Arc<dyn MemoryManager>,
    pub instances: Arc<dyn InstanceManager>,
    net: Option<NetNode>,
    next_gather: AtomicU64,
}

impl Context {
    pub fn host() -> Result<Self> {
        let tm = HostTopologyManager::os_query();
        let topology = tm.query_topology()?;
        let tm: Arc<dyn TopologyManager> = Arc::new(tm);
        Self::build(
            0,
            1,
            topology,
            Arc::new(HostCommunicationManager::default()),
            Arc::new(HostInstanceManager::new(tm)),
            None,
        )
    }

    pub fn net(node: NetNode) -> Result<Self> {
        let topology = HostTopologyManager::os_query().query_topology()?;
        let rank = node.id().0 as usize;
        let size = node.get_instances()?.len();
        Self::build(rank, size, topology, Arc::new(node.clone()), Arc::new(node.clone()), Some(node))
    }

    /// Net backend when started by the launcher, host backend otherwise.
    pub fn from_env() -> Result<Self> {
        if std::env::var_os(ENV_INSTANCE_COUNT).is_some() {
            Self::net(NetNode::from_env()?)
        } else {
            Self::host()
        }
    }

    fn build(
        rank: usize,
        size: usize,
        topology: Topology,
        comm: Arc<dyn CommunicationManager>,
        instances: Arc<dyn InstanceManager>,
        net: Option<NetNode>,
    ) -> Result<Self> {
        let space = topology
            .memory_spaces()
            .next()
            .cloned()
            .ok_or_else(|| crate::BenchError::InvalidConfig("topology has no memory space".into()))?;
        let mem = Arc::new(HostMemoryManager::new(&topology));
        Ok(Self { rank, size, topology, space, comm, mem, instances, net, next_gather: AtomicU64::new(0) })
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    pub fn backend_name(&self) -> &'static str {
        if self.net.is_some() {
            "net"
        } else {
            "host"
        }
    }

    pub fn barrier(&self) -> Result<()> {
        self.comm.exchange_global_slots(BARRIER_TAG, &[])?;
        Ok(())
    }

    /// Collective. Every instance contributes `bytes`; the root receives all
    /// contributions in rank order, the others `None`.
    pub fn gather(&self, bytes: &[u8]) -> Result<Option<Vec<Vec<u8>>>> {
        let tag = GATHER_TAG_BASE + self.next_gather.fetch_add(1, Ordering::Relaxed);
        let slot = self.mem.allocate(&self.space, bytes.len().max(1) as u64)?;
        slot.write(0, bytes)?;
        let table = self.comm.exchange_global_slots(tag, &[(self.rank as u64, slot.clone())])?;
        let mut out = None;
        if self.is_root() {
            let mut parts = vec![Vec::new(); self.size];
            parts[0] = bytes.to_vec();
            let mut pending = Vec::new();
            for g in table.iter().filter(|g| g.key != 0) {
                let dst = self.mem.allocate(&self.space, g.size)?;
                self.comm.memcpy(SlotRef::Local(&dst), 0, SlotRef::Global(g), 0, g.size)?;
                pending.push((g.key as usize, dst));
            }
            self.comm.fence(tag)?;
            for (rank, dst) in pending {
                parts[rank] = dst.to_vec()?;
                self.mem.free(&dst)?;
            }
            out = Some(parts);
        }
        self.barrier()?;
        self.mem.free(&slot)?;
        Ok(out)
    }

    /// Leaves the deployment; a no-op on the host backend.
    pub fn finalize(self) -> Result<()> {
        if let Some(node) = &self.net {
            node.finalize()?;
        }
        Ok(())
    }
}
