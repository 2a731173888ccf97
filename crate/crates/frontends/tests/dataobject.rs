use std::collections::HashSet;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use hicr_core::{HicrError, InstanceId, LocalMemorySlot, MemoryManager, MemorySpace, TopologyManager};
use hicr_frontends::channels::{create_spsc, Backoff, ChannelConfig, ChannelResources, Role};
use hicr_frontends::dataobject::{DataObjectHandle, DataObjectId, DataObjectStore, SERIALIZED_HANDLE_LEN};
use hicr_frontends::rpc::RpcEngine;
use hicr_frontends::Error;
use hicr_host::{HostCommunicationManager, HostMemoryManager, HostTopologyManager, LoopbackTransport};
use hicr_net::{finalize_all, local_deployment, NetNode};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAG: u64 = 50;

fn memory() -> (Arc<HostMemoryManager>, MemorySpace) {
    let t = HostTopologyManager::os_query().query_topology().unwrap();
    let space = t.memory_spaces().next().unwrap().clone();
    (Arc::new(HostMemoryManager::new(&t)), space)
}

fn filled(mem: &HostMemoryManager, space: &MemorySpace, bytes: &[u8]) -> LocalMemorySlot {
    let s = mem.allocate(space, bytes.len() as u64).unwrap();
    s.write(0, bytes).unwrap();
    s
}

fn host_store() -> DataObjectStore {
    DataObjectStore::new(
        Arc::new(HostCommunicationManager::default()),
        Arc::new(LoopbackTransport::new(InstanceId(0))),
        TAG,
    )
}

fn net_store(node: &NetNode) -> DataObjectStore {
    DataObjectStore::new(Arc::new(node.clone()), Arc::new(node.clone()), TAG)
}

#[test]
fn ids_carry_publisher_and_sequence() {
    let (mem, space) = memory();
    let store = host_store();
    let a = store.publish(&mem.allocate(&space, 1 << 20).unwrap()).unwrap();
    let b = store.publish(&mem.allocate(&space, 16).unwrap()).unwrap();
    assert_eq!(a.publisher(), InstanceId(0));
    assert_ne!(a.sequence(), b.sequence());
    assert_eq!(store.get_handle(a).unwrap().size, 1 << 20);
}

#[test]
fn self_handle_round_trip() {
    let (mem, space) = memory();
    let store = host_store();
    let src = filled(&mem, &space, b"payload-123");
    let id = store.publish(&src).unwrap();
    let h = store.get_handle(id).unwrap();
    assert_eq!((h.id, h.owner, h.size), (id, InstanceId(0), 11));
    let dst = mem.allocate(&space, 16).unwrap();
    store.get(&h, &dst).unwrap();
    store.fence_objects().unwrap();
    assert_eq!(&dst.to_vec().unwrap()[..11], b"payload-123");
    let small = mem.allocate(&space, 4).unwrap();
    assert_eq!(store.get(&h, &small), Err(Error::SizeMismatch { expected: 11, found: 4 }));
}

#[test]
fn same_slot_published_twice() {
    let (mem, space) = memory();
    let store = host_store();
    let src = filled(&mem, &space, b"twice");
    let a = store.publish(&src).unwrap();
    let b = store.publish(&src).unwrap();
    assert_ne!(a, b);
    for id in [a, b] {
        let dst = mem.allocate(&space, 5).unwrap();
        store.get(&store.get_handle(id).unwrap(), &dst).unwrap();
        store.fence_objects().unwrap();
        assert_eq!(dst.to_vec().unwrap(), b"twice");
    }
    store.unpublish(a).unwrap();
    let dst = mem.allocate(&space, 5).unwrap();
    store.get(&store.get_handle(b).unwrap(), &dst).unwrap();
    assert_eq!(dst.to_vec().unwrap(), b"twice");
}

#[test]
fn unpublish_lifecycle() {
    let (mem, space) = memory();
    let store = host_store();
    let src = filled(&mem, &space, b"abc");
    let id = store.publish(&src).unwrap();
    assert_eq!(mem.free(&src), Err(HicrError::SlotPinned(src.id())));
    let stale = store.get_handle(id).unwrap();
    store.unpublish(id).unwrap();
    assert_eq!(store.get_handle(id), Err(Error::UnknownObject(id.0)));
    assert_eq!(store.unpublish(id), Err(Error::UnknownObject(id.0)));
    let dst = mem.allocate(&space, 3).unwrap();
    assert_eq!(store.get(&stale, &dst), Err(Error::UnknownObject(id.0)));
    mem.free(&src).unwrap();
    let never = DataObjectId::new(InstanceId(0), 999);
    assert_eq!(store.get_handle(never), Err(Error::UnknownObject(never.0)));
}

#[test]
fn invalid_slot_rejected() {
    let (mem, space) = memory();
    let store = host_store();
    let s = mem.allocate(&space, 8).unwrap();
    mem.free(&s).unwrap();
    assert_eq!(store.publish(&s), Err(Error::Core(HicrError::InvalidSlot(s.id()))));
}

#[test]
fn serialized_handle_size_is_constant() {
    let nodes = local_deployment(2).unwrap();
    let (mem, space) = memory();
    let store = net_store(&nodes[0]);
    let mut sizes = HashSet::new();
    for len in [1usize, 1000, 1 << 20] {
        let id = store.publish(&mem.allocate(&space, len as u64).unwrap()).unwrap();
        let h = store.get_handle(id).unwrap();
        assert_eq!(h.size, len as u64);
        let b = h.to_bytes();
        assert_eq!(DataObjectHandle::from_bytes(&b).unwrap(), h);
        sizes.insert(b.len());
    }
    assert_eq!(sizes.into_iter().collect::<Vec<_>>(), [SERIALIZED_HANDLE_LEN]);
    drop(store);
    finalize_all(nodes).unwrap();
}

#[test]
fn id_sent_through_channel_then_fetched() {
    let nodes = local_deployment(2).unwrap();
    let (mem, space) = memory();
    let res = |n: &NetNode| ChannelResources::new(Arc::new(n.clone()), mem.clone(), space.clone());
    let (r0, r1) = (res(&nodes[0]), res(&nodes[1]));
    let (s0, s1) = (net_store(&nodes[0]), net_store(&nodes[1]));
    let (m0, sp0) = (mem.clone(), space.clone());
    let publisher = thread::spawn(move || {
        let mut ch = create_spsc(&r0, Role::Producer, ChannelConfig::new(1, 8, 7)).unwrap();
        let id = s0.publish(&filled(&m0, &sp0, b"payload-123")).unwrap();
        ch.push_bytes_blocking(&id.0.to_le_bytes(), Backoff::default()).unwrap();
        // keep the store alive until the peer has fetched
        let mut done = create_spsc(&r0, Role::Consumer, ChannelConfig::new(1, 1, 8)).unwrap();
        done.pop_blocking(Backoff::default()).unwrap();
        s0
    });
    let mut ch = create_spsc(&r1, Role::Consumer, ChannelConfig::new(1, 8, 7)).unwrap();
    let mut done = create_spsc(&r1, Role::Producer, ChannelConfig::new(1, 1, 8)).unwrap();
    let id = DataObjectId(u64::from_le_bytes(ch.pop_blocking(Backoff::default()).unwrap().try_into().unwrap()));
    assert_eq!(id.publisher(), InstanceId(0));
    let h = s1.get_handle(id).unwrap();
    assert_eq!(h.size, 11);
    let dst = mem.allocate(&space, 11).unwrap();
    s1.get(&h, &dst).unwrap();
    s1.fence_objects().unwrap();
    assert_eq!(dst.to_vec().unwrap(), b"payload-123");
    let missing = DataObjectId::new(InstanceId(0), 4242);
    assert_eq!(s1.get_handle(missing), Err(Error::UnknownObject(missing.0)));
    done.push_bytes(&[1]).unwrap();
    drop(publisher.join().unwrap());
    drop(s1);
    finalize_all(nodes).unwrap();
}

/// A get already issued when the publisher unpublishes still delivers.
#[test]
fn get_before_unpublish_delivers() {
    let nodes = local_deployment(2).unwrap();
    let (mem, space) = memory();
    let s0 = Arc::new(net_store(&nodes[0]));
    let s1 = net_store(&nodes[1]);
    let rpc0 = Arc::new(RpcEngine::new(Arc::new(nodes[0].clone())));
    let rpc1 = RpcEngine::new(Arc::new(nodes[1].clone()));
    let payload: Vec<u8> = (0..100_000u32).map(|i| (i % 251) as u8).collect();
    let id = s0.publish(&filled(&mem, &space, &payload)).unwrap();
    let s0c = s0.clone();
    rpc0.register("unpublish", move |arg| {
        s0c.unpublish(DataObjectId(u64::from_le_bytes(arg.try_into().unwrap()))).unwrap();
        Vec::new()
    })
    .unwrap();
    let listener = {
        let rpc0 = rpc0.clone();
        thread::spawn(move || rpc0.listen().unwrap())
    };
    let h = s1.get_handle(id).unwrap();
    let dst = mem.allocate(&space, payload.len() as u64).unwrap();
    s1.get(&h, &dst).unwrap();
    rpc1.request(InstanceId(0), "unpublish", &id.0.to_le_bytes()).unwrap();
    listener.join().unwrap();
    s1.fence_objects().unwrap();
    assert_eq!(dst.to_vec().unwrap(), payload);
    assert_eq!(s1.get_handle(id), Err(Error::UnknownObject(id.0)));
    let late = mem.allocate(&space, payload.len() as u64).unwrap();
    s1.get(&h, &late).unwrap();
    assert_eq!(s1.fence_objects(), Err(Error::UnknownObject(id.0)));
    drop((s1, rpc0, rpc1));
    drop(s0);
    finalize_all(nodes).unwrap();
}

#[test]
fn random_payloads_across_instances() {
    let nodes = local_deployment(3).unwrap();
    let (mem, space) = memory();
    let stores: Vec<_> = nodes.iter().map(net_store).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sizes: Vec<usize> = (0..12).map(|_| rng.random_range(1..=256 * 1024)).collect();
    sizes.push(64 << 20);
    for (k, size) in sizes.into_iter().enumerate() {
        let publisher = k % 3;
        let reader = (k + 1 + k % 2) % 3;
        let mut payload = vec![0u8; size];
        rng.fill(&mut payload[..]);
        let id = stores[publisher].publish(&filled(&mem, &space, &payload)).unwrap();
        let h = stores[reader].get_handle(id).unwrap();
        let dst = mem.allocate(&space, size as u64).unwrap();
        stores[reader].get(&h, &dst).unwrap();
        stores[reader].fence_objects().unwrap();
        assert!(dst.to_vec().unwrap() == payload, "object {k} of {size} bytes differs");
        stores[publisher].unpublish(id).unwrap();
        mem.free(&dst).unwrap();
    }
    drop(stores);
    finalize_all(nodes).unwrap();
}

#[test]
fn ids_unique_over_a_million_publishes() {
    let nodes = local_deployment(4).unwrap();
    let (mem, space) = memory();
    let (tx, rx) = mpsc::channel();
    let handles: Vec<_> = nodes
        .iter()
        .map(|n| {
            let store = net_store(n);
            let slot = mem.allocate(&space, 8).unwrap();
            let tx = tx.clone();
            thread::spawn(move || {
                let ids: Vec<u64> = (0..250_000).map(|_| store.publish(&slot).unwrap().0).collect();
                assert_eq!(store.published(), 250_000);
                tx.send(ids).unwrap();
            })
        })
        .collect();
    drop(tx);
    for h in handles {
        h.join().unwrap();
    }
    let mut all = HashSet::new();
    for ids in rx {
        for id in ids {
            assert!(all.insert(id), "duplicate id {id:#x}");
        }
    }
    assert_eq!(all.len(), 1_000_000);
    finalize_all(nodes).unwrap();
}
