//! One instance of a TCP deployment: bootstrap, connections, progress
//! service, and the state shared by the manager implementations.
//!
//! Every connection has a reader thread (the progress service). The side
//! that opened a connection sends requests on it; the accepting side only
//! writes replies, so a reader never waits on its own connection's writer.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use hicr_core::{
    GlobalMemorySlot, HicrError, IncomingRequest, InlineHandler, InstanceId, InstanceState, InstanceTemplate,
    LocalMemorySlot, Reply, Result, Topology,
};
use log::{debug, warn};
use parking_lot::{Condvar, Mutex, MutexGuard};

use crate::config::{NetConfig, SpawnedChild};
use crate::token::RemoteToken;
use crate::wire::{
    put_header, read_frame, write_frame, write_message, ExchangeOutcome, GatherEntry, Message, MsgType, RawFrame,
    TableEntry, UNASSIGNED_ID,
};

pub(crate) struct Conn {
    pub id: u64,
    pub initiator: bool,
    writer: Mutex<ConnWriter>,
    ctl: TcpStream,
    pub peer: Mutex<Option<u64>>,
    pub hello_addr: Mutex<String>,
    alive: AtomicBool,
    /// Per tag: (PUT frames processed, PUT frames rejected), receiver side.
    incoming: Mutex<HashMap<u64, (u64, u64)>>,
}

struct ConnWriter {
    stream: TcpStream,
    /// Per tag: PUT frames written.
    sent: HashMap<u64, u64>,
    /// Per tag: PUT frames confirmed by a fence acknowledgement.
    fenced: HashMap<u64, u64>,
}

impl Conn {
    fn new(id: u64, stream: TcpStream, initiator: bool) -> Result<Arc<Self>> {
        stream.set_nodelay(true)?;
        let ctl = stream.try_clone()?;
        Ok(Arc::new(Self {
            id,
            initiator,
            writer: Mutex::new(ConnWriter { stream, sent: HashMap::new(), fenced: HashMap::new() }),
            ctl,
            peer: Mutex::new(None),
            hello_addr: Mutex::new(String::new()),
            alive: AtomicBool::new(true),
            incoming: Mutex::new(HashMap::new()),
        }))
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Acquire)
    }

    fn broken(&self, e: std::io::Error) -> HicrError {
        self.alive.store(false, Ordering::Release);
        let _ = self.ctl.shutdown(std::net::Shutdown::Both);
        HicrError::PeerUnreachable(format!("connection to {:?} failed: {e}", *self.peer.lock()))
    }

    pub fn send(&self, m: &Message) -> Result<()> {
        if !self.is_alive() {
            return Err(HicrError::PeerUnreachable(format!("connection to {:?} closed", *self.peer.lock())));
        }
        let mut w = self.writer.lock();
        write_message(&mut w.stream, m).map_err(|e| self.broken(e))
    }

    fn send_put(&self, tag: u64, buffer_id: u64, offset: u64, seq: u32, total: u32, data: &[u8]) -> Result<()> {
        if !self.is_alive() {
            return Err(HicrError::PeerUnreachable(format!("connection to {:?} closed", *self.peer.lock())));
        }
        let header = put_header(tag, buffer_id, offset, seq, total);
        let mut w = self.writer.lock();
        write_frame(&mut w.stream, MsgType::Put, &[&header, data]).map_err(|e| self.broken(e))?;
        *w.sent.entry(tag).or_default() += 1;
        Ok(())
    }

    /// Announces the PUT count for `tag` unless everything sent is already
    /// confirmed. Returns the announced count.
    fn send_fence_token(&self, tag: u64, fence_id: u64) -> Result<Option<u64>> {
        let mut w = self.writer.lock();
        let sent = w.sent.get(&tag).copied().unwrap_or(0);
        if sent == w.fenced.get(&tag).copied().unwrap_or(0) {
            return Ok(None);
        }
        let m = Message::FenceToken { ack: false, tag, fence_id, count: sent, nacks: 0 };
        write_message(&mut w.stream, &m).map_err(|e| self.broken(e))?;
        Ok(Some(sent))
    }

    fn mark_fenced(&self, tag: u64, count: u64) {
        let mut w = self.writer.lock();
        let f = w.fenced.entry(tag).or_default();
        *f = (*f).max(count);
    }

    fn close(&self) {
        self.alive.store(false, Ordering::Release);
        let _ = self.ctl.shutdown(std::net::Shutdown::Both);
    }
}

struct PeerInfo {
    addr: String,
    finalized: bool,
}

struct PendingGet {
    dst: LocalMemorySlot,
    dst_offset: u64,
    size: u64,
    tag: u64,
    conn: u64,
}

struct Gather {
    arrived: BTreeMap<u64, Vec<GatherEntry>>,
}

#[derive(Default)]
struct CoordState {
    next_id: u64,
    /// Member id to the connection it bootstrapped on.
    ctrl: HashMap<u64, Arc<Conn>>,
    gathers: HashMap<u64, VecDeque<Gather>>,
    keys: HashMap<u64, HashSet<u64>>,
    byes: HashSet<u64>,
    table_sent: bool,
}

enum Queued {
    Remote { conn: Arc<Conn>, seq: u64 },
    Local(std::sync::mpsc::Sender<Reply>),
}

struct SpawnAckInfo {
    instance: u64,
    ok: bool,
    message: String,
}

#[derive(Default)]
pub(crate) struct State {
    pub self_id: Option<u64>,
    pub root: u64,
    peers: BTreeMap<u64, PeerInfo>,
    outgoing: HashMap<u64, Arc<Conn>>,
    conns: Vec<Arc<Conn>>,
    pub exposed: HashMap<u64, LocalMemorySlot>,
    pub tables: HashMap<u64, BTreeMap<u64, GlobalMemorySlot>>,
    rounds: HashMap<u64, u64>,
    exchange_results: HashMap<u64, ExchangeOutcome>,
    coord: Option<CoordState>,
    fence_acks: HashMap<u64, (u64, u64)>,
    nacks_seen: HashMap<(u64, u64), u64>,
    pending_gets: HashMap<u64, PendingGet>,
    gets_outstanding: HashMap<u64, u64>,
    get_errors: HashMap<u64, Vec<String>>,
    rpc_replies: HashMap<u64, Reply>,
    requests: VecDeque<(InstanceId, u64, Vec<u8>, Queued)>,
    handlers: HashMap<u64, InlineHandler>,
    spawn_acks: HashMap<u64, Vec<SpawnAckInfo>>,
    children: Vec<Box<dyn SpawnedChild>>,
    table_received: bool,
    rejected: Option<String>,
    bye_received: bool,
    finalized: bool,
}

pub(crate) struct Node {
    pub cfg: NetConfig,
    pub listen_addr: String,
    state: Mutex<State>,
    cv: Condvar,
    connect_lock: Mutex<()>,
    ids: AtomicU64,
    closing: AtomicBool,
}

/// The deployment as seen by one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeploymentView {
    pub self_id: InstanceId,
    pub peers: Vec<(InstanceId, String)>,
    pub root: InstanceId,
}

fn unreachable_peer(id: u64) -> HicrError {
    HicrError::PeerUnreachable(format!("instance {id} is not part of this deployment"))
}

impl Node {
    pub fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock()
    }

    pub fn notify(&self) {
        self.cv.notify_all();
    }

    pub fn next_id(&self) -> u64 {
        self.ids.fetch_add(1, Ordering::Relaxed)
    }

    pub fn self_id(&self) -> u64 {
        self.lock().self_id.unwrap_or(UNASSIGNED_ID)
    }

    pub fn is_coordinator(&self) -> bool {
        self.cfg.is_coordinator()
    }

    /// Waits until `f` yields a value; `Ok(None)` when `timeout` elapses first.
    pub fn wait_for<T>(
        &self,
        timeout: Duration,
        mut f: impl FnMut(&mut State) -> Option<Result<T>>,
    ) -> Result<Option<T>> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        loop {
            if let Some(r) = f(&mut st) {
                return r.map(Some);
            }
            if self.closing.load(Ordering::Acquire) {
                return Err(HicrError::PeerUnreachable("instance is shutting down".into()));
            }
            if self.cv.wait_until(&mut st, deadline).timed_out() {
                return match f(&mut st) {
                    Some(r) => r.map(Some),
                    None => Ok(None),
                };
            }
        }
    }

    pub fn view(&self) -> DeploymentView {
        let st = self.lock();
        DeploymentView {
            self_id: InstanceId(st.self_id.unwrap_or(UNASSIGNED_ID)),
            peers: st.peers.iter().map(|(id, p)| (InstanceId(*id), p.addr.clone())).collect(),
            root: InstanceId(st.root),
        }
    }

    pub fn instance_states(&self) -> Vec<(u64, InstanceState)> {
        let st = self.lock();
        st.peers
            .iter()
            .map(|(id, p)| (*id, if p.finalized { InstanceState::Finalized } else { InstanceState::Active }))
            .collect()
    }

    /// Connection this instance uses to send requests to `peer`.
    pub fn conn_to(self: &Arc<Self>, peer: u64) -> Result<Arc<Conn>> {
        if let Some(c) = self.lock().outgoing.get(&peer) {
            if c.is_alive() {
                return Ok(c.clone());
            }
            return Err(HicrError::PeerUnreachable(format!("connection to instance {peer} is closed")));
        }
        let _g = self.connect_lock.lock();
        let (addr, me) = {
            let st = self.lock();
            if let Some(c) = st.outgoing.get(&peer) {
                return Ok(c.clone());
            }
            let addr = st.peers.get(&peer).map(|p| p.addr.clone()).ok_or_else(|| unreachable_peer(peer))?;
            (addr, st.self_id.unwrap_or(UNASSIGNED_ID))
        };
        let stream = connect(&addr, self.cfg.timeout)
            .map_err(|e| HicrError::PeerUnreachable(format!("instance {peer} at {addr}: {e}")))?;
        let conn = Conn::new(self.next_id(), stream, true)?;
        *conn.peer.lock() = Some(peer);
        conn.send(&Message::Hello { id: me, joined: false, listen_addr: self.listen_addr.clone() })?;
        self.start_reader(conn.clone())?;
        let mut st = self.lock();
        st.outgoing.insert(peer, conn.clone());
        Ok(conn)
    }

    fn start_reader(self: &Arc<Self>, conn: Arc<Conn>) -> Result<()> {
        let stream = conn.ctl.try_clone()?;
        self.lock().conns.push(conn.clone());
        let node = self.clone();
        thread::Builder::new()
            .name(format!("hicr-net-rx{}", conn.id))
            .spawn(move || node.reader_loop(conn, stream))
            .map_err(|e| HicrError::Io(e.to_string()))?;
        Ok(())
    }

    fn reader_loop(self: Arc<Self>, conn: Arc<Conn>, stream: TcpStream) {
        let mut r = BufReader::with_capacity(256 * 1024, stream);
        loop {
            match read_frame(&mut r) {
                Ok(Some(RawFrame::Frame { msg_type, payload })) => match Message::decode(msg_type, &payload) {
                    Ok(m) => self.handle(&conn, m),
                    Err(e) => warn!("dropping malformed frame (type {msg_type}): {e}"),
                },
                Ok(Some(RawFrame::Oversized(len))) => {
                    warn!("closing connection {}: frame of {len} bytes exceeds limit", conn.id);
                    break;
                }
                Ok(None) => break,
                Err(e) => {
                    if conn.is_alive() && !self.closing.load(Ordering::Acquire) {
                        debug!("connection {} read error: {e}", conn.id);
                    }
                    break;
                }
            }
        }
        conn.close();
        let peer = *conn.peer.lock();
        let mut guard = self.lock();
        let st = &mut *guard;
        if let (Some(coord), Some(p)) = (st.coord.as_mut(), peer) {
            if !conn.initiator && coord.ctrl.get(&p).is_some_and(|c| c.id == conn.id) && !coord.byes.contains(&p) {
                warn!("instance {p} left without saying goodbye");
                coord.byes.insert(p);
                if let Some(info) = st.peers.get_mut(&p) {
                    info.finalized = true;
                }
            }
        }
        drop(guard);
        let outgoing = self.try_complete_gathers();
        self.send_all(outgoing);
        self.notify();
    }

    fn send_all(&self, msgs: Vec<(Arc<Conn>, Message)>) {
        for (c, m) in msgs {
            if let Err(e) = c.send(&m) {
                warn!("failed to deliver {:?}: {e}", m.msg_type());
            }
        }
    }

    fn handle(self: &Arc<Self>, conn: &Arc<Conn>, m: Message) {
        match m {
            Message::Hello { id, joined, listen_addr } => self.on_hello(conn, id, joined, listen_addr),
            Message::PeerTable { you, root, peers } => {
                let mut st = self.lock();
                st.self_id = Some(you);
                st.root = root;
                for (id, addr) in peers {
                    st.peers.entry(id).or_insert(PeerInfo { addr, finalized: false });
                }
                st.table_received = true;
                drop(st);
                self.notify();
            }
            Message::ExchangeGather { tag, from, entries, .. } => {
                if !self.is_coordinator() {
                    warn!("exchange gather sent to a non-root instance");
                    return;
                }
                let out = self.coord_gather(tag, from, entries);
                self.send_all(out);
            }
            Message::ExchangeTable { tag, outcome, .. } => {
                self.lock().exchange_results.insert(tag, outcome);
                self.notify();
            }
            Message::Put { tag, buffer_id, offset, data, .. } => {
                let slot = self.lock().exposed.get(&buffer_id).cloned();
                let res = match slot {
                    Some(s) => s.write(offset, &data),
                    None => Err(HicrError::InvalidSlot(buffer_id)),
                };
                let mut inc = conn.incoming.lock();
                let e = inc.entry(tag).or_default();
                e.0 += 1;
                if let Err(err) = res {
                    debug!("rejecting put to buffer {buffer_id}: {err}");
                    e.1 += 1;
                }
            }
            Message::GetReq { req_id, buffer_id, offset, size } => {
                let slot = self.lock().exposed.get(&buffer_id).cloned();
                let reply = match slot.map(|s| s.read(offset, size)) {
                    Some(Ok(data)) => Message::GetResp { req_id, data },
                    Some(Err(e)) => Message::GetNack { req_id, reason: e.to_string() },
                    None => Message::GetNack { req_id, reason: HicrError::InvalidSlot(buffer_id).to_string() },
                };
                self.send_all(vec![(conn.clone(), reply)]);
            }
            Message::GetResp { req_id, data } => {
                let pending = self.lock().pending_gets.remove(&req_id);
                let Some(p) = pending else {
                    warn!("response for unknown get {req_id}");
                    return;
                };
                let res = if data.len() as u64 != p.size {
                    Err(HicrError::Protocol(format!("get returned {} of {} bytes", data.len(), p.size)))
                } else {
                    p.dst.write(p.dst_offset, &data)
                };
                self.finish_get(p.tag, res.err().map(|e| e.to_string()));
            }
            Message::GetNack { req_id, reason } => {
                let pending = self.lock().pending_gets.remove(&req_id);
                if let Some(p) = pending {
                    self.finish_get(p.tag, Some(reason));
                }
            }
            Message::FenceToken { ack: false, tag, fence_id, .. } => {
                let (count, nacks) = conn.incoming.lock().get(&tag).copied().unwrap_or((0, 0));
                let reply = Message::FenceToken { ack: true, tag, fence_id, count, nacks };
                self.send_all(vec![(conn.clone(), reply)]);
            }
            Message::FenceToken { ack: true, fence_id, count, nacks, .. } => {
                self.lock().fence_acks.insert(fence_id, (count, nacks));
                self.notify();
            }
            Message::SpawnAck { request_id, instance, ok, message } => {
                self.lock().spawn_acks.entry(request_id).or_default().push(SpawnAckInfo { instance, ok, message });
                self.notify();
            }
            Message::TopologyReport { request_id, spawner, topology, template } => {
                if !self.is_coordinator() {
                    warn!("topology report sent to a non-root instance");
                    return;
                }
                let out = self.admit(conn, request_id, spawner, &topology, &template);
                self.send_all(out);
            }
            Message::RpcReq { seq, name_hash, arg } => self.on_rpc_request(conn, seq, name_hash, arg),
            Message::RpcResp { seq, status, ret } => {
                let status = match hicr_core::ReplyStatus::from_u8(status) {
                    Some(s) => s,
                    None => {
                        warn!("dropping reply with unknown status {status}");
                        return;
                    }
                };
                self.lock().rpc_replies.insert(seq, Reply { status, payload: ret });
                self.notify();
            }
            Message::Bye => self.on_bye(conn),
        }
    }

    fn finish_get(&self, tag: u64, error: Option<String>) {
        let mut st = self.lock();
        if let Some(n) = st.gets_outstanding.get_mut(&tag) {
            *n -= 1;
        }
        if let Some(e) = error {
            st.get_errors.entry(tag).or_default().push(e);
        }
        drop(st);
        self.notify();
    }

    fn on_hello(self: &Arc<Self>, conn: &Arc<Conn>, id: u64, joined: bool, listen_addr: String) {
        *conn.hello_addr.lock() = listen_addr.clone();
        if id != UNASSIGNED_ID {
            *conn.peer.lock() = Some(id);
        }
        if !self.is_coordinator() || joined {
            return;
        }
        let count = self.cfg.count;
        let mut guard = self.lock();
        let st = &mut *guard;
        let coord = st.coord.as_mut().expect("coordinator state");
        if coord.table_sent || coord.ctrl.contains_key(&id) {
            return;
        }
        if id == 0 || id >= count {
            warn!("rejecting bootstrap hello with launch index {id} (deployment of {count})");
            return;
        }
        coord.ctrl.insert(id, conn.clone());
        st.peers.insert(id, PeerInfo { addr: listen_addr, finalized: false });
        if st.peers.len() as u64 == count {
            let out = Self::table_messages(st);
            st.coord.as_mut().unwrap().table_sent = true;
            st.table_received = true;
            drop(guard);
            self.send_all(out);
            self.notify();
        }
    }

    fn table_messages(st: &State) -> Vec<(Arc<Conn>, Message)> {
        let peers: Vec<(u64, String)> = st.peers.iter().map(|(id, p)| (*id, p.addr.clone())).collect();
        let coord = st.coord.as_ref().unwrap();
        let mut ids: Vec<_> = coord.ctrl.keys().copied().collect();
        ids.sort();
        ids.into_iter()
            .filter(|id| !coord.byes.contains(id))
            .map(|id| (coord.ctrl[&id].clone(), Message::PeerTable { you: id, root: st.root, peers: peers.clone() }))
            .collect()
    }

    fn admit(
        &self,
        conn: &Arc<Conn>,
        request_id: u64,
        spawner: u64,
        topology: &str,
        template: &str,
    ) -> Vec<(Arc<Conn>, Message)> {
        let verdict = (|| -> std::result::Result<(), String> {
            let topo = Topology::from_json(topology).map_err(|e| e.to_string())?;
            let t: InstanceTemplate = serde_json::from_str(template).map_err(|e| e.to_string())?;
            if topo.satisfies(&t.required_topology) {
                Ok(())
            } else {
                Err("reported topology does not satisfy the instance template".into())
            }
        })();
        let mut st = self.lock();
        let st = &mut *st;
        let mut out = Vec::new();
        let ack = match verdict {
            Ok(()) => {
                let coord = st.coord.as_mut().unwrap();
                let id = coord.next_id;
                coord.next_id += 1;
                coord.ctrl.insert(id, conn.clone());
                *conn.peer.lock() = Some(id);
                st.peers.insert(id, PeerInfo { addr: conn.hello_addr.lock().clone(), finalized: false });
                out.extend(Self::table_messages(st));
                Message::SpawnAck { request_id, instance: id, ok: true, message: String::new() }
            }
            Err(msg) => {
                warn!("terminating spawned instance: {msg}");
                out.push((conn.clone(), Message::Bye));
                Message::SpawnAck { request_id, instance: UNASSIGNED_ID, ok: false, message: msg }
            }
        };
        if spawner == 0 {
            if let Message::SpawnAck { instance, ok, message, .. } = ack {
                st.spawn_acks.entry(request_id).or_default().push(SpawnAckInfo { instance, ok, message });
            }
        } else if let Some(c) = st.coord.as_ref().unwrap().ctrl.get(&spawner) {
            out.push((c.clone(), ack));
        }
        self.notify();
        out
    }

    /// Records a gather contribution at the root; completed rounds produce
    /// messages to broadcast.
    pub fn coord_gather(&self, tag: u64, from: u64, entries: Vec<GatherEntry>) -> Vec<(Arc<Conn>, Message)> {
        {
            let mut st = self.lock();
            let queue = st.coord.as_mut().unwrap().gathers.entry(tag).or_default();
            match queue.iter_mut().find(|g| !g.arrived.contains_key(&from)) {
                Some(g) => {
                    g.arrived.insert(from, entries);
                }
                None => {
                    let mut arrived = BTreeMap::new();
                    arrived.insert(from, entries);
                    queue.push_back(Gather { arrived });
                }
            }
        }
        self.try_complete_gathers()
    }

    fn try_complete_gathers(&self) -> Vec<(Arc<Conn>, Message)> {
        let mut out = Vec::new();
        let mut st = self.lock();
        let st = &mut *st;
        let Some(coord) = st.coord.as_mut() else { return out };
        let active: HashSet<u64> = st.peers.iter().filter(|(_, p)| !p.finalized).map(|(id, _)| *id).collect();
        let mut local_results = Vec::new();
        for (tag, queue) in coord.gathers.iter_mut() {
            while let Some(front) = queue.front() {
                if !active.iter().all(|id| front.arrived.contains_key(id)) {
                    break;
                }
                let g = queue.pop_front().unwrap();
                let known = coord.keys.entry(*tag).or_default();
                let mut seen = HashSet::new();
                let mut dup = None;
                let mut table = Vec::new();
                for (owner, es) in &g.arrived {
                    for e in es {
                        if !seen.insert(e.key) || known.contains(&e.key) {
                            dup.get_or_insert(e.key);
                        }
                        table.push(TableEntry { key: e.key, owner: *owner, size: e.size, buffer_id: e.buffer_id });
                    }
                }
                let outcome = match dup {
                    Some(k) => ExchangeOutcome::DuplicateKey(k),
                    None => {
                        known.extend(seen);
                        table.sort_by_key(|t| t.key);
                        ExchangeOutcome::Table(table)
                    }
                };
                for from in g.arrived.keys() {
                    if *from == 0 {
                        local_results.push((*tag, outcome.clone()));
                    } else if let Some(c) = coord.ctrl.get(from) {
                        out.push((c.clone(), Message::ExchangeTable { tag: *tag, round: 0, outcome: outcome.clone() }));
                    }
                }
            }
        }
        for (tag, o) in local_results {
            st.exchange_results.insert(tag, o);
        }
        self.notify();
        out
    }

    fn on_rpc_request(self: &Arc<Self>, conn: &Arc<Conn>, seq: u64, name_hash: u64, arg: Vec<u8>) {
        let source = InstanceId(conn.peer.lock().unwrap_or(UNASSIGNED_ID));
        let handler = self.lock().handlers.get(&name_hash).cloned();
        if let Some(h) = handler {
            let r = h(source, &arg);
            self.send_all(vec![(conn.clone(), Message::RpcResp { seq, status: r.status as u8, ret: r.payload })]);
            return;
        }
        self.lock().requests.push_back((source, name_hash, arg, Queued::Remote { conn: conn.clone(), seq }));
        self.notify();
    }

    pub fn enqueue_local_request(&self, name_hash: u64, arg: Vec<u8>, tx: std::sync::mpsc::Sender<Reply>) {
        let me = InstanceId(self.self_id());
        self.lock().requests.push_back((me, name_hash, arg, Queued::Local(tx)));
        self.notify();
    }

    pub fn inline_handler(&self, name_hash: u64) -> Option<InlineHandler> {
        self.lock().handlers.get(&name_hash).cloned()
    }

    pub fn set_inline_handler(&self, name_hash: u64, h: InlineHandler) {
        self.lock().handlers.insert(name_hash, h);
    }

    pub fn next_request(&self, timeout: Option<Duration>) -> Result<IncomingRequest> {
        let t = timeout.unwrap_or(Duration::from_secs(u32::MAX as u64));
        let item = self
            .wait_for(t, |st| st.requests.pop_front().map(Ok))?
            .ok_or_else(|| HicrError::Timeout("no incoming request".into()))?;
        let (source, name_hash, arg, q) = item;
        let responder: hicr_core::transport::Responder = match q {
            Queued::Remote { conn, seq } => {
                Box::new(move |r: Reply| conn.send(&Message::RpcResp { seq, status: r.status as u8, ret: r.payload }))
            }
            Queued::Local(tx) => {
                Box::new(move |r: Reply| tx.send(r).map_err(|_| HicrError::Protocol("requester is gone".into())))
            }
        };
        Ok(IncomingRequest::new(source, name_hash, arg, responder))
    }

    pub fn wait_rpc_reply(&self, conn: &Arc<Conn>, seq: u64) -> Result<Reply> {
        self.wait_for(self.cfg.collective_timeout, |st| {
            if let Some(r) = st.rpc_replies.remove(&seq) {
                return Some(Ok(r));
            }
            (!conn.is_alive()).then(|| Err(HicrError::PeerUnreachable("connection closed before reply".into())))
        })?
        .ok_or_else(|| HicrError::Timeout(format!("no reply to remote request {seq}")))
    }

    fn on_bye(&self, conn: &Arc<Conn>) {
        let peer = *conn.peer.lock();
        let mut st = self.lock();
        if st.coord.is_some() && !conn.initiator {
            if let Some(p) = peer {
                st.coord.as_mut().unwrap().byes.insert(p);
                if let Some(info) = st.peers.get_mut(&p) {
                    info.finalized = true;
                }
            }
            drop(st);
            let out = self.try_complete_gathers();
            self.send_all(out);
        } else {
            if st.table_received {
                st.bye_received = true;
            } else {
                st.rejected = Some("the coordinator rejected this instance".into());
            }
            drop(st);
        }
        self.notify();
    }

    // transfers

    pub fn put(
        self: &Arc<Self>,
        tag: u64,
        owner: u64,
        buffer_id: u64,
        dst_offset: u64,
        src: &LocalMemorySlot,
        src_offset: u64,
        size: u64,
    ) -> Result<()> {
        let conn = self.conn_to(owner)?;
        let chunk = crate::wire::MAX_CHUNK as u64;
        let total = size.div_ceil(chunk).max(1);
        let total_u32 = u32::try_from(total).map_err(|_| HicrError::Unsupported("transfer too large".into()))?;
        for i in 0..total {
            let off = i * chunk;
            let len = chunk.min(size - off);
            let data = src.read(src_offset + off, len)?;
            conn.send_put(tag, buffer_id, dst_offset + off, i as u32, total_u32, &data)?;
        }
        Ok(())
    }

    pub fn get(
        self: &Arc<Self>,
        tag: u64,
        owner: u64,
        buffer_id: u64,
        src_offset: u64,
        dst: &LocalMemorySlot,
        dst_offset: u64,
        size: u64,
    ) -> Result<()> {
        let conn = self.conn_to(owner)?;
        let chunk = crate::wire::MAX_CHUNK as u64;
        let total = size.div_ceil(chunk).max(1);
        for i in 0..total {
            let off = i * chunk;
            let len = chunk.min(size - off);
            let req_id = self.next_id();
            {
                let mut st = self.lock();
                st.pending_gets.insert(
                    req_id,
                    PendingGet { dst: dst.clone(), dst_offset: dst_offset + off, size: len, tag, conn: conn.id },
                );
                *st.gets_outstanding.entry(tag).or_default() += 1;
            }
            let req = Message::GetReq { req_id, buffer_id, offset: src_offset + off, size: len };
            if let Err(e) = conn.send(&req) {
                let mut st = self.lock();
                st.pending_gets.remove(&req_id);
                *st.gets_outstanding.get_mut(&tag).unwrap() -= 1;
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn fence(self: &Arc<Self>, tag: u64) -> Result<()> {
        let conns: Vec<Arc<Conn>> = self.lock().outgoing.values().cloned().collect();
        let mut waits = Vec::new();
        for c in conns {
            let fence_id = self.next_id();
            if let Some(count) = c.send_fence_token(tag, fence_id)? {
                waits.push((fence_id, count, c));
            }
        }
        let mut rejected = Vec::new();
        for (fence_id, count, c) in waits {
            let (done, nacks) = self
                .wait_for(self.cfg.timeout, |st| {
                    if let Some(a) = st.fence_acks.remove(&fence_id) {
                        return Some(Ok(a));
                    }
                    (!c.is_alive()).then(|| Err(HicrError::PeerUnreachable("connection closed during fence".into())))
                })?
                .ok_or_else(|| HicrError::Timeout(format!("fence on tag {tag}")))?;
            if done < count {
                return Err(HicrError::Protocol(format!("peer processed {done} of {count} transfers")));
            }
            c.mark_fenced(tag, count);
            let mut st = self.lock();
            let seen = st.nacks_seen.entry((c.id, tag)).or_default();
            if nacks > *seen {
                rejected.push(format!("{} transfer(s) to instance {:?} rejected", nacks - *seen, *c.peer.lock()));
                *seen = nacks;
            }
        }
        let errors = self
            .wait_for(self.cfg.timeout, |st| {
                if st.gets_outstanding.get(&tag).copied().unwrap_or(0) == 0 {
                    return Some(Ok(st.get_errors.remove(&tag).unwrap_or_default()));
                }
                let dead = st
                    .pending_gets
                    .values()
                    .filter(|p| p.tag == tag)
                    .any(|p| st.conns.iter().any(|c| c.id == p.conn && !c.is_alive()));
                dead.then(|| Err(HicrError::PeerUnreachable("connection closed with gets in flight".into())))
            })?
            .ok_or_else(|| HicrError::Timeout(format!("fence on tag {tag}: gets outstanding")))?;
        rejected.extend(errors);
        if rejected.is_empty() {
            Ok(())
        } else {
            Err(HicrError::RemoteRejected(rejected.join("; ")))
        }
    }

    pub fn exchange(
        self: &Arc<Self>,
        tag: u64,
        contributions: &[(u64, LocalMemorySlot)],
    ) -> Result<Vec<GlobalMemorySlot>> {
        for (_, s) in contributions {
            s.ensure_valid()?;
        }
        let (me, round) = {
            let mut st = self.lock();
            for (_, s) in contributions {
                st.exposed.insert(s.id(), s.clone());
            }
            let r = st.rounds.entry(tag).or_default();
            *r += 1;
            let r = *r;
            (st.self_id.unwrap_or(UNASSIGNED_ID), r)
        };
        let entries: Vec<GatherEntry> =
            contributions.iter().map(|(k, s)| GatherEntry { key: *k, size: s.size(), buffer_id: s.id() }).collect();
        let ctrl = if self.is_coordinator() {
            let out = self.coord_gather(tag, me, entries);
            self.send_all(out);
            None
        } else {
            let conn = self.conn_to(0)?;
            conn.send(&Message::ExchangeGather { tag, round, from: me, entries })?;
            Some(conn)
        };
        let outcome = self
            .wait_for(self.cfg.collective_timeout, |st| {
                if let Some(o) = st.exchange_results.remove(&tag) {
                    return Some(Ok(o));
                }
                let lost = ctrl.as_ref().is_some_and(|c| !c.is_alive());
                lost.then(|| Err(HicrError::PeerUnreachable("lost connection to the coordinator".into())))
            })?
            .ok_or_else(|| HicrError::CollectiveMismatch(format!("exchange on tag {tag} timed out")))?;
        match outcome {
            ExchangeOutcome::DuplicateKey(key) => Err(HicrError::DuplicateKey { tag, key }),
            ExchangeOutcome::Mismatch(m) => Err(HicrError::CollectiveMismatch(m)),
            ExchangeOutcome::Table(entries) => {
                let mut st = self.lock();
                let st = &mut *st;
                let mut out = Vec::with_capacity(entries.len());
                for e in entries {
                    let addr = st.peers.get(&e.owner).map(|p| p.addr.clone()).unwrap_or_default();
                    let token = RemoteToken { owner: e.owner, buffer_id: e.buffer_id, size: e.size, owner_addr: addr };
                    let local = if e.owner == me { st.exposed.get(&e.buffer_id).cloned() } else { None };
                    let g = GlobalMemorySlot {
                        tag,
                        key: e.key,
                        owner: InstanceId(e.owner),
                        local,
                        size: e.size,
                        remote_token: token.encode(),
                    };
                    st.tables.entry(tag).or_default().insert(e.key, g.clone());
                    out.push(g);
                }
                Ok(out)
            }
        }
    }

    // spawning

    pub fn spawn(self: &Arc<Self>, n: usize, template: &InstanceTemplate) -> Result<Vec<u64>> {
        let hook = match &self.cfg.spawn_hook {
            Some(h) => h.clone(),
            None => crate::config::self_spawn_hook()?,
        };
        let me = self.self_id();
        let request_id = (me << 32) | (self.next_id() & 0xffff_ffff);
        let count = self.lock().peers.len();
        let template_json = serde_json::to_string(template).map_err(|e| HicrError::SpawnFailure(e.to_string()))?;
        let env = vec![
            (crate::config::ENV_COORD_ADDR.to_string(), self.cfg.coord_addr.clone()),
            (crate::config::ENV_JOINED_AT_RUNTIME.to_string(), "1".to_string()),
            (crate::config::ENV_INSTANCE_COUNT.to_string(), count.to_string()),
            (crate::config::ENV_SPAWN_REQUEST.to_string(), request_id.to_string()),
            (crate::config::ENV_SPAWN_PARENT.to_string(), me.to_string()),
            (crate::config::ENV_SPAWN_TEMPLATE.to_string(), template_json),
        ];
        let mut children = Vec::with_capacity(n);
        for _ in 0..n {
            children.push(hook(&env)?);
        }
        let deadline = Instant::now() + self.cfg.timeout;
        let acks = loop {
            let got = self.wait_for(Duration::from_millis(50), |st| {
                (st.spawn_acks.get(&request_id).map_or(0, |v| v.len()) >= n)
                    .then(|| Ok(st.spawn_acks.remove(&request_id).unwrap()))
            })?;
            if let Some(a) = got {
                break a;
            }
            let acked = self.lock().spawn_acks.get(&request_id).map_or(0, |v| v.len());
            let exited: Vec<String> = children.iter_mut().filter_map(|c| c.exited()).collect();
            if exited.len() > acked {
                let detail = exited.join(", ");
                self.lock().children.extend(children);
                return Err(HicrError::SpawnFailure(format!("spawned instance exited before joining ({detail})")));
            }
            if Instant::now() >= deadline {
                self.lock().children.extend(children);
                return Err(HicrError::SpawnFailure(format!("{acked} of {n} instances joined before the timeout")));
            }
        };
        self.lock().children.extend(children);
        if let Some(bad) = acks.iter().find(|a| !a.ok) {
            return Err(HicrError::TemplateUnsatisfiable(bad.message.clone()));
        }
        let ids: Vec<u64> = acks.iter().map(|a| a.instance).collect();
        // the peer table precedes the ack on the same connection, but make sure
        self.wait_for(self.cfg.timeout, |st| ids.iter().all(|i| st.peers.contains_key(i)).then_some(Ok(())))?;
        Ok(ids)
    }

    // teardown

    pub fn finalize(self: &Arc<Self>) -> Result<()> {
        if self.lock().finalized {
            return Ok(());
        }
        let res = if self.is_coordinator() {
            let waited = self.wait_for(self.cfg.collective_timeout, |st| {
                let coord = st.coord.as_ref().unwrap();
                let all = st.peers.keys().filter(|id| **id != 0).all(|id| coord.byes.contains(id));
                all.then_some(Ok(()))
            });
            let conns: Vec<Arc<Conn>> = self.lock().coord.as_ref().unwrap().ctrl.values().cloned().collect();
            for c in conns {
                let _ = c.send(&Message::Bye);
            }
            match waited {
                Ok(Some(())) => Ok(()),
                Ok(None) => Err(HicrError::Timeout("not every instance finalized".into())),
                Err(e) => Err(e),
            }
        } else {
            match self.conn_to(0).and_then(|c| c.send(&Message::Bye)) {
                Ok(()) => self
                    .wait_for(self.cfg.collective_timeout, |st| st.bye_received.then_some(Ok(())))
                    .and_then(|r| r.ok_or_else(|| HicrError::Timeout("coordinator did not confirm teardown".into()))),
                Err(e) => Err(e),
            }
        };
        self.shutdown();
        res
    }

    pub fn shutdown(&self) {
        if self.closing.swap(true, Ordering::AcqRel) {
            return;
        }
        let (conns, mut children) = {
            let mut st = self.lock();
            st.finalized = true;
            (std::mem::take(&mut st.conns), std::mem::take(&mut st.children))
        };
        for c in conns {
            c.close();
        }
        // wake the accept loop
        let _ = connect(&self.listen_addr, Duration::from_millis(200));
        self.notify();
        for c in children.iter_mut() {
            c.reap(self.cfg.timeout);
        }
    }

    fn accept_loop(self: Arc<Self>, listener: TcpListener) {
        for stream in listener.incoming() {
            if self.closing.load(Ordering::Acquire) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            match Conn::new(self.next_id(), stream, false) {
                Ok(conn) => {
                    if let Err(e) = self.start_reader(conn) {
                        warn!("cannot serve connection: {e}");
                    }
                }
                Err(e) => warn!("cannot set up connection: {e}"),
            }
        }
    }
}

fn connect(addr: &str, timeout: Duration) -> std::io::Result<TcpStream> {
    let mut last = None;
    for a in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "address did not resolve")))
}

/// An instance whose listener is bound but which has not joined yet.
pub struct PendingNode {
    cfg: NetConfig,
    listener: Option<TcpListener>,
    addr: SocketAddr,
}

impl PendingNode {
    pub fn bind(cfg: NetConfig) -> Result<Self> {
        if cfg.is_coordinator() {
            let listener = TcpListener::bind(cfg.coord_addr.as_str())
                .map_err(|e| HicrError::Io(format!("cannot listen on {}: {e}", cfg.coord_addr)))?;
            let addr = listener.local_addr()?;
            let mut cfg = cfg;
            cfg.coord_addr = addr.to_string();
            Ok(Self { cfg, listener: Some(listener), addr })
        } else {
            Ok(Self { cfg, listener: None, addr: "0.0.0.0:0".parse().unwrap() })
        }
    }

    /// Address of the coordinator listener (only meaningful for index 0).
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub(crate) fn complete(self) -> Result<Arc<Node>> {
        let cfg = self.cfg;
        let deadline = Instant::now() + cfg.timeout;
        let (listener, ctrl_stream) = match self.listener {
            Some(l) => (l, None),
            None => {
                let stream = loop {
                    match connect(&cfg.coord_addr, cfg.timeout) {
                        Ok(s) => break s,
                        Err(e) if Instant::now() >= deadline => {
                            return Err(HicrError::BootstrapTimeout(format!("coordinator {}: {e}", cfg.coord_addr)))
                        }
                        Err(_) => thread::sleep(Duration::from_millis(25)),
                    }
                };
                let ip = stream.local_addr()?.ip();
                (TcpListener::bind((ip, 0))?, Some(stream))
            }
        };
        let listen_addr = listener.local_addr()?.to_string();
        let mut state = State::default();
        if cfg.is_coordinator() {
            state.self_id = Some(0);
            state.peers.insert(0, PeerInfo { addr: listen_addr.clone(), finalized: false });
            state.coord = Some(CoordState { next_id: cfg.count, ..Default::default() });
            if cfg.count <= 1 {
                state.coord.as_mut().unwrap().table_sent = true;
                state.table_received = true;
            }
        } else if cfg.join.is_none() {
            state.self_id = Some(cfg.index);
        }
        let node = Arc::new(Node {
            cfg,
            listen_addr,
            state: Mutex::new(state),
            cv: Condvar::new(),
            connect_lock: Mutex::new(()),
            ids: AtomicU64::new(1),
            closing: AtomicBool::new(false),
        });
        let n2 = node.clone();
        thread::Builder::new()
            .name("hicr-net-accept".into())
            .spawn(move || n2.accept_loop(listener))
            .map_err(|e| HicrError::Io(e.to_string()))?;
        if let Some(stream) = ctrl_stream {
            let conn = Conn::new(node.next_id(), stream, true)?;
            *conn.peer.lock() = Some(0);
            node.lock().outgoing.insert(0, conn.clone());
            node.start_reader(conn.clone())?;
            let hello_id = if node.cfg.join.is_some() { UNASSIGNED_ID } else { node.cfg.index };
            conn.send(&Message::Hello {
                id: hello_id,
                joined: node.cfg.join.is_some(),
                listen_addr: node.listen_addr.clone(),
            })?;
            if let Some(join) = &node.cfg.join {
                use hicr_core::TopologyManager;
                let topo = hicr_host::HostTopologyManager::os_query().query_topology()?;
                let template = serde_json::to_string(&join.template).map_err(|e| HicrError::Protocol(e.to_string()))?;
                conn.send(&Message::TopologyReport {
                    request_id: join.request_id,
                    spawner: join.spawner,
                    topology: topo.to_json(),
                    template,
                })?;
            }
        }
        let res = node.wait_for(node.cfg.collective_timeout, |st| {
            if let Some(r) = &st.rejected {
                return Some(Err(HicrError::TemplateUnsatisfiable(r.clone())));
            }
            st.table_received.then_some(Ok(()))
        });
        match res {
            Ok(Some(())) => Ok(node),
            Ok(None) => {
                node.shutdown();
                Err(HicrError::BootstrapTimeout("peer table not received".into()))
            }
            Err(e) => {
                node.shutdown();
                Err(e)
            }
        }
    }
}
