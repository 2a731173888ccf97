//! Multi-process backend over TCP.
//!
//! Instances are started by a launcher that sets `HICR_INSTANCE_INDEX`,
//! `HICR_INSTANCE_COUNT` and `HICR_COORD_ADDR`. Instance 0 acts as
//! coordinator and root: it hands out the peer table, roots collectives and
//! admits instances spawned at runtime. Each instance runs a progress service
//! that applies incoming puts and answers gets without application code
//! taking part.

pub mod config;
mod node;
pub mod token;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

use hicr_core::{
    classify_memcpy, validate_slot_range, CommunicationManager, ComputeManager, GlobalMemorySlot, HicrError,
    IncomingRequest, InlineHandler, Instance, InstanceId, InstanceManager, InstanceState, InstanceTemplate,
    LocalMemorySlot, Managers, MemcpyDirection, Reply, RequestTransport, Result, SlotRef, TopologyManager,
    TransferHandle,
};
use hicr_host::{copy_local, HostMemoryManager, HostTopologyManager};

pub use config::{NetConfig, SpawnHook, SpawnedChild};
pub use node::{DeploymentView, PendingNode};
pub use token::RemoteToken;

use node::Node;
use wire::Message;

struct Handle {
    node: Arc<Node>,
}

impl Drop for Handle {
    fn drop(&mut self) {
        self.node.shutdown();
    }
}

/// One instance of a TCP deployment. Implements the communication, instance
/// and request-transport contracts. Clones share the instance; the last
/// clone dropped closes its connections.
#[derive(Clone)]
pub struct NetNode {
    h: Arc<Handle>,
}

impl PendingNode {
    pub fn join(self) -> Result<NetNode> {
        Ok(NetNode { h: Arc::new(Handle { node: self.complete()? }) })
    }
}

impl NetNode {
    /// Binds and joins in one step.
    pub fn bootstrap(cfg: NetConfig) -> Result<Self> {
        PendingNode::bind(cfg)?.join()
    }

    pub fn from_env() -> Result<Self> {
        Self::bootstrap(NetConfig::from_env()?)
    }

    fn node(&self) -> &Arc<Node> {
        &self.h.node
    }

    pub fn view(&self) -> DeploymentView {
        self.node().view()
    }

    pub fn id(&self) -> InstanceId {
        InstanceId(self.node().self_id())
    }

    pub fn listen_addr(&self) -> &str {
        &self.node().listen_addr
    }

    pub fn coordinator_addr(&self) -> &str {
        &self.node().cfg.coord_addr
    }

    /// Leaves the deployment: waits until every instance has finalized
    /// (coordinator) or the coordinator confirmed (others), then closes.
    pub fn finalize(&self) -> Result<()> {
        self.node().finalize()
    }

    fn mem_ref(&self, g: &GlobalMemorySlot) -> Result<LocalMemorySlot> {
        if let Some(l) = &g.local {
            return Ok(l.clone());
        }
        let t = RemoteToken::decode(&g.remote_token)?;
        self.node().lock().exposed.get(&t.buffer_id).cloned().ok_or(HicrError::InvalidSlot(t.buffer_id))
    }
}

/// Full manager set for this instance: host topology, memory and the given
/// compute manager, with communication and instances over the network.
pub fn net_managers(node: &NetNode, compute: Arc<dyn ComputeManager>) -> Result<Managers> {
    let tm = HostTopologyManager::os_query();
    let t = tm.query_topology()?;
    Ok(Managers {
        topology: Arc::new(tm),
        memory: Arc::new(HostMemoryManager::new(&t)),
        communication: Arc::new(node.clone()),
        compute,
        instance: Arc::new(node.clone()),
    })
}

impl CommunicationManager for NetNode {
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
        let node = self.node();
        let me = InstanceId(node.self_id());
        let sequence = node.next_id();
        match (direction, dst, src) {
            (MemcpyDirection::LocalToLocal, SlotRef::Local(d), SlotRef::Local(s)) => {
                copy_local(d, dst_offset, s, src_offset, size)?;
                Ok(TransferHandle { tag: None, sequence })
            }
            (MemcpyDirection::LocalToGlobal, SlotRef::Global(g), SlotRef::Local(s)) => {
                if g.owner == me {
                    copy_local(&self.mem_ref(g)?, dst_offset, s, src_offset, size)?;
                } else {
                    let t = RemoteToken::decode(&g.remote_token)?;
                    node.put(g.tag, g.owner.0, t.buffer_id, dst_offset, s, src_offset, size)?;
                }
                Ok(TransferHandle { tag: Some(g.tag), sequence })
            }
            (MemcpyDirection::GlobalToLocal, SlotRef::Local(d), SlotRef::Global(g)) => {
                if g.owner == me {
                    copy_local(d, dst_offset, &self.mem_ref(g)?, src_offset, size)?;
                } else {
                    let t = RemoteToken::decode(&g.remote_token)?;
                    node.get(g.tag, g.owner.0, t.buffer_id, src_offset, d, dst_offset, size)?;
                }
                Ok(TransferHandle { tag: Some(g.tag), sequence })
            }
            _ => unreachable!("classify_memcpy covers all pairings"),
        }
    }

    fn fence(&self, tag: u64) -> Result<()> {
        self.node().fence(tag)
    }

    fn fence_local(&self) -> Result<()> {
        Ok(())
    }

    fn exchange_global_slots(
        &self,
        tag: u64,
        contributions: &[(u64, LocalMemorySlot)],
    ) -> Result<Vec<GlobalMemorySlot>> {
        self.node().exchange(tag, contributions)
    }

    fn get_global_slot(&self, tag: u64, key: u64) -> Result<GlobalMemorySlot> {
        self.node().lock().tables.get(&tag).and_then(|t| t.get(&key)).cloned().ok_or(HicrError::NotFound { tag, key })
    }

    fn expose_slot(&self, slot: &LocalMemorySlot) -> Result<Vec<u8>> {
        slot.ensure_valid()?;
        let node = self.node();
        let owner = node.self_id();
        node.lock().exposed.insert(slot.id(), slot.clone());
        Ok(RemoteToken { owner, buffer_id: slot.id(), size: slot.size(), owner_addr: node.listen_addr.clone() }
            .encode())
    }

    fn revoke_slot(&self, token: &[u8]) -> Result<()> {
        let t = RemoteToken::decode(token)?;
        self.node().lock().exposed.remove(&t.buffer_id).map(|_| ()).ok_or(HicrError::InvalidSlot(t.buffer_id))
    }

    fn import_global_slot(&self, tag: u64, key: u64, owner: InstanceId, token: &[u8]) -> Result<GlobalMemorySlot> {
        let t = RemoteToken::decode(token)?;
        if t.owner != owner.0 {
            return Err(HicrError::Protocol(format!("token belongs to instance {}, not {owner}", t.owner)));
        }
        let local = if owner.0 == self.node().self_id() {
            Some(self.node().lock().exposed.get(&t.buffer_id).cloned().ok_or(HicrError::InvalidSlot(t.buffer_id))?)
        } else {
            None
        };
        Ok(GlobalMemorySlot { tag, key, owner, local, size: t.size, remote_token: token.to_vec() })
    }
}

impl InstanceManager for NetNode {
    fn get_instances(&self) -> Result<Vec<Instance>> {
        let root = self.view().root;
        Ok(self
            .node()
            .instance_states()
            .into_iter()
            .map(|(id, state)| Instance { id: InstanceId(id), is_root: InstanceId(id) == root, state })
            .collect())
    }

    fn current_instance(&self) -> Instance {
        let v = self.view();
        Instance::new(v.self_id, v.self_id == v.root)
    }

    fn create_instances(&self, count: usize, template: &InstanceTemplate) -> Result<Vec<Instance>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let local = HostTopologyManager::os_query().query_topology()?;
        if !local.satisfies(&template.required_topology) {
            return Err(HicrError::TemplateUnsatisfiable("this host lacks the required resources".into()));
        }
        let ids = self.node().spawn(count, template)?;
        Ok(ids
            .into_iter()
            .map(|id| Instance { id: InstanceId(id), is_root: false, state: InstanceState::Active })
            .collect())
    }
}

impl RequestTransport for NetNode {
    fn current_instance(&self) -> InstanceId {
        self.id()
    }

    fn request(&self, target: InstanceId, name_hash: u64, argument: &[u8]) -> Result<Reply> {
        let node = self.node();
        if target == self.id() {
            if let Some(h) = node.inline_handler(name_hash) {
                return Ok(h(target, argument));
            }
            let (tx, rx) = std::sync::mpsc::channel();
            node.enqueue_local_request(name_hash, argument.to_vec(), tx);
            return rx
                .recv_timeout(node.cfg.collective_timeout)
                .map_err(|_| HicrError::Timeout("no reply to local request".into()));
        }
        let conn = node.conn_to(target.0)?;
        let seq = node.next_id();
        conn.send(&Message::RpcReq { seq, name_hash, arg: argument.to_vec() })?;
        node.wait_rpc_reply(&conn, seq)
    }

    fn next_request(&self, timeout: Option<Duration>) -> Result<IncomingRequest> {
        self.node().next_request(timeout)
    }

    fn set_inline_handler(&self, name_hash: u64, handler: InlineHandler) {
        self.node().set_inline_handler(name_hash, handler)
    }
}

/// Starts `n` instances inside this process on loopback, e.g. for tests.
/// Returned in launch order; index 0 is the coordinator.
pub fn local_deployment(n: usize) -> Result<Vec<NetNode>> {
    local_deployment_with(n, |c| c)
}

pub fn local_deployment_with(n: usize, tune: impl Fn(NetConfig) -> NetConfig) -> Result<Vec<NetNode>> {
    assert!(n >= 1, "a deployment needs at least one instance");
    let coord = PendingNode::bind(tune(NetConfig::launch(0, n as u64, "127.0.0.1:0")))?;
    let addr = coord.local_addr().to_string();
    let others: Vec<_> = (1..n)
        .map(|i| {
            let cfg = tune(NetConfig::launch(i as u64, n as u64, addr.clone()));
            std::thread::spawn(move || NetNode::bootstrap(cfg))
        })
        .collect();
    let mut nodes = vec![coord.join()?];
    for h in others {
        nodes.push(h.join().map_err(|_| HicrError::BootstrapTimeout("bootstrap thread panicked".into()))??);
    }
    Ok(nodes)
}

/// Finalizes all instances of an in-process deployment concurrently.
pub fn finalize_all(nodes: Vec<NetNode>) -> Result<()> {
    let handles: Vec<_> = nodes.into_iter().map(|n| std::thread::spawn(move || n.finalize())).collect();
    let mut res = Ok(());
    for h in handles {
        let r = h.join().map_err(|_| HicrError::Protocol("finalize panicked".into()))?;
        if res.is_ok() {
            res = r;
        }
    }
    res
}
