//! Fixed-capacity message channels built from exchanged global slots.
//!
//! Every channel is a circular buffer of `capacity` messages of
//! `message_size` bytes hosted by the consumer. The producer advances a head
//! index and the consumer a tail index; both are published through 8-byte
//! sync slots written with local-to-global copies, separate from the payload.
//! The head slot lives with the consumer and the tail slot with the producer,
//! so each side checks the other's progress with a local read.
//!
//! Creation is collective: all instances of the deployment call the
//! exchange under `cfg.tag`. Instances without an endpoint call
//! [`join_without_endpoint`].

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use hicr_core::{CommunicationManager, GlobalMemorySlot, HicrError, LocalMemorySlot, MemoryManager, MemorySpace};

use crate::error::{Error, Result};
use crate::fnv1a64;

const KIND_RING: u64 = 0;
const KIND_HEAD: u64 = 1;
const KIND_TAIL: u64 = 2;
const KIND_LOCK: u64 = 3;
const MAX_PRODUCERS: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelConfig {
    pub capacity: u64,
    pub message_size: u64,
    pub tag: u64,
}

impl ChannelConfig {
    pub fn new(capacity: u64, message_size: u64, tag: u64) -> Self {
        Self { capacity, message_size, tag }
    }

    fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::InvalidConfig("capacity must be at least one message".into()));
        }
        if self.message_size == 0 {
            return Err(Error::InvalidConfig("message size must be nonzero".into()));
        }
        if self.capacity.checked_mul(self.message_size).is_none() {
            return Err(Error::InvalidConfig("ring size overflows".into()));
        }
        Ok(())
    }
}

/// Managers and memory space a channel endpoint allocates from.
#[derive(Clone)]
pub struct ChannelResources {
    pub comm: Arc<dyn CommunicationManager>,
    pub mem: Arc<dyn MemoryManager>,
    pub space: MemorySpace,
    /// How long to wait for the peer's slots when the backend's exchange
    /// only reports this instance's own contributions.
    pub lookup_timeout: Duration,
}

impl ChannelResources {
    pub fn new(comm: Arc<dyn CommunicationManager>, mem: Arc<dyn MemoryManager>, space: MemorySpace) -> Self {
        Self { comm, mem, space, lookup_timeout: Duration::from_secs(30) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Producer,
    Consumer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpscMode {
    /// One shared ring; producers take turns through a mutual exclusion lock.
    Locking,
    /// One ring per producer; the consumer polls them round-robin.
    NonLocking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpscRole {
    Producer(usize),
    Consumer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Push {
    Ok,
    Full,
}

/// Retry policy of the blocking helpers.
#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub spins: u32,
    pub sleep: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { spins: 64, sleep: Duration::from_micros(100) }
    }
}

impl Backoff {
    fn wait(&self, attempt: u32) {
        if attempt >= self.spins {
            thread::sleep(self.sleep);
        } else {
            std::hint::spin_loop();
        }
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Spsc,
    Mpsc(MpscMode, usize),
}

impl Layout {
    fn producers(self) -> usize {
        match self {
            Layout::Spsc => 1,
            Layout::Mpsc(_, p) => p,
        }
    }

    fn code(self) -> u8 {
        match self {
            Layout::Spsc => 0,
            Layout::Mpsc(MpscMode::NonLocking, _) => 1,
            Layout::Mpsc(MpscMode::Locking, _) => 2,
        }
    }
}

fn checksum(cfg: &ChannelConfig, layout: Layout) -> u64 {
    let mut b = Vec::with_capacity(25);
    b.extend_from_slice(&cfg.capacity.to_le_bytes());
    b.extend_from_slice(&cfg.message_size.to_le_bytes());
    b.push(layout.code());
    b.extend_from_slice(&(layout.producers() as u64).to_le_bytes());
    fnv1a64(&b) & 0xffff_ffff
}

/// Exchange key: configuration checksum in the high word, slot kind and
/// producer index in the low word.
fn slot_key(sum: u64, kind: u64, producer: usize) -> u64 {
    (sum << 32) | (kind << 24) | producer as u64
}

struct ProducerRing {
    ring: GlobalMemorySlot,
    head_remote: GlobalMemorySlot,
    tail_local: LocalMemorySlot,
    head: u64,
}

struct ConsumerRing {
    ring: LocalMemorySlot,
    head_local: LocalMemorySlot,
    tail_remote: GlobalMemorySlot,
    tail: u64,
}

struct LockingProducer {
    index: usize,
    producers: usize,
    ring: GlobalMemorySlot,
    head: GlobalMemorySlot,
    tail: GlobalMemorySlot,
    lock: GlobalMemorySlot,
    /// Receives the lock array and the two indices.
    view: LocalMemorySlot,
}

struct LockingConsumer {
    ring: LocalMemorySlot,
    head_local: LocalMemorySlot,
    tail_local: LocalMemorySlot,
    tail: u64,
}

enum End {
    Producer(ProducerRing),
    Consumer { rings: Vec<ConsumerRing>, cursor: usize, peeked: Option<usize> },
    LockingProducer(LockingProducer),
    LockingConsumer(LockingConsumer),
}

/// One endpoint of a channel. Owned by a single flow of execution at a time.
pub struct Channel {
    cfg: ChannelConfig,
    res: ChannelResources,
    end: End,
    /// 8-byte source for index publication.
    scratch: LocalMemorySlot,
    staging: Option<LocalMemorySlot>,
    ring_bytes: u64,
}

/// Takes part in a channel's collective creation without holding an endpoint.
pub fn join_without_endpoint(comm: &dyn CommunicationManager, tag: u64) -> Result<()> {
    comm.exchange_global_slots(tag, &[])?;
    Ok(())
}

pub fn create_spsc(res: &ChannelResources, role: Role, cfg: ChannelConfig) -> Result<Channel> {
    let role = match role {
        Role::Producer => MpscRole::Producer(0),
        Role::Consumer => MpscRole::Consumer,
    };
    Channel::create(res, Layout::Spsc, role, cfg)
}

pub fn create_mpsc(
    res: &ChannelResources,
    mode: MpscMode,
    producers: usize,
    role: MpscRole,
    cfg: ChannelConfig,
) -> Result<Channel> {
    if producers == 0 || producers >= MAX_PRODUCERS {
        return Err(Error::InvalidConfig(format!("{producers} producers")));
    }
    if let MpscRole::Producer(i) = role {
        if i >= producers {
            return Err(Error::InvalidConfig(format!("producer index {i} of {producers}")));
        }
    }
    Channel::create(res, Layout::Mpsc(mode, producers), role, cfg)
}

struct Lookup<'a> {
    res: &'a ChannelResources,
    tag: u64,
    table: Vec<GlobalMemorySlot>,
    own: Vec<u64>,
}

impl Lookup<'_> {
    fn find(&self, want: u64) -> Result<GlobalMemorySlot> {
        if let Some(g) = self.table.iter().find(|g| g.key == want) {
            return Ok(g.clone());
        }
        // A table holding foreign entries is the complete collective result.
        if self.table.iter().any(|g| !self.own.contains(&g.key)) {
            let low = want & 0xffff_ffff;
            return Err(match self.table.iter().find(|g| g.key & 0xffff_ffff == low) {
                Some(g) => Error::ConfigMismatch(format!(
                    "peer slot {low:#x} has checksum {:#x}, expected {:#x}",
                    g.key >> 32,
                    want >> 32
                )),
                None => Error::ConfigMismatch(format!("no peer contributed slot {low:#x}")),
            });
        }
        let deadline = Instant::now() + self.res.lookup_timeout;
        loop {
            match self.res.comm.get_global_slot(self.tag, want) {
                Ok(g) => return Ok(g),
                Err(HicrError::NotFound { .. }) if Instant::now() < deadline => thread::sleep(Duration::from_millis(1)),
                Err(HicrError::NotFound { .. }) => {
                    return Err(Error::ConfigMismatch(format!("no peer slot {want:#x} with matching configuration")))
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Channel {
    fn create(res: &ChannelResources, layout: Layout, role: MpscRole, cfg: ChannelConfig) -> Result<Self> {
        cfg.validate()?;
        let sum = checksum(&cfg, layout);
        let producers = layout.producers();
        let ring_size = cfg.capacity * cfg.message_size;
        let alloc = |size: u64| res.mem.allocate(&res.space, size);
        let locking = matches!(layout, Layout::Mpsc(MpscMode::Locking, _));

        let mut contributions: Vec<(u64, LocalMemorySlot)> = Vec::new();
        let mut consumer_locals: Vec<(LocalMemorySlot, LocalMemorySlot)> = Vec::new();
        let mut locking_locals = None;
        let mut tail_local = None;
        let mut ring_bytes = 0;
        match (role, locking) {
            (MpscRole::Consumer, false) => {
                for p in 0..producers {
                    let ring = alloc(ring_size)?;
                    let head = alloc(8)?;
                    contributions.push((slot_key(sum, KIND_RING, p), ring.clone()));
                    contributions.push((slot_key(sum, KIND_HEAD, p), head.clone()));
                    consumer_locals.push((ring, head));
                    ring_bytes += ring_size;
                }
            }
            (MpscRole::Producer(i), false) => {
                let tail = alloc(8)?;
                contributions.push((slot_key(sum, KIND_TAIL, i), tail.clone()));
                tail_local = Some(tail);
            }
            (MpscRole::Consumer, true) => {
                let ring = alloc(ring_size)?;
                let head = alloc(8)?;
                let tail = alloc(8)?;
                let lock = alloc(16 * producers as u64)?;
                contributions.push((slot_key(sum, KIND_RING, 0), ring.clone()));
                contributions.push((slot_key(sum, KIND_HEAD, 0), head.clone()));
                contributions.push((slot_key(sum, KIND_TAIL, 0), tail.clone()));
                contributions.push((slot_key(sum, KIND_LOCK, 0), lock));
                locking_locals = Some((ring, head, tail));
                ring_bytes = ring_size;
            }
            (MpscRole::Producer(_), true) => {}
        }

        let table = res.comm.exchange_global_slots(cfg.tag, &contributions)?;
        let lookup = Lookup { res, tag: cfg.tag, table, own: contributions.iter().map(|(k, _)| *k).collect() };

        let end = match (role, locking) {
            (MpscRole::Consumer, false) => {
                let mut rings = Vec::with_capacity(producers);
                for (p, (ring, head_local)) in consumer_locals.into_iter().enumerate() {
                    let tail_remote = lookup.find(slot_key(sum, KIND_TAIL, p))?;
                    rings.push(ConsumerRing { ring, head_local, tail_remote, tail: 0 });
                }
                End::Consumer { rings, cursor: 0, peeked: None }
            }
            (MpscRole::Producer(i), false) => End::Producer(ProducerRing {
                ring: lookup.find(slot_key(sum, KIND_RING, i))?,
                head_remote: lookup.find(slot_key(sum, KIND_HEAD, i))?,
                tail_local: tail_local.expect("allocated above"),
                head: 0,
            }),
            (MpscRole::Consumer, true) => {
                let (ring, head_local, tail_local) = locking_locals.expect("allocated above");
                End::LockingConsumer(LockingConsumer { ring, head_local, tail_local, tail: 0 })
            }
            (MpscRole::Producer(index), true) => End::LockingProducer(LockingProducer {
                index,
                producers,
                ring: lookup.find(slot_key(sum, KIND_RING, 0))?,
                head: lookup.find(slot_key(sum, KIND_HEAD, 0))?,
                tail: lookup.find(slot_key(sum, KIND_TAIL, 0))?,
                lock: lookup.find(slot_key(sum, KIND_LOCK, 0))?,
                view: alloc(16 * producers as u64 + 16)?,
            }),
        };
        let staging = match role {
            MpscRole::Producer(_) => Some(alloc(cfg.message_size)?),
            MpscRole::Consumer => None,
        };
        Ok(Self { cfg, res: res.clone(), end, scratch: alloc(8)?, staging, ring_bytes })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn is_producer(&self) -> bool {
        matches!(self.end, End::Producer(_) | End::LockingProducer(_))
    }

    /// Bytes of ring storage this endpoint allocated.
    pub fn ring_bytes(&self) -> u64 {
        self.ring_bytes
    }

    /// Messages pushed but not yet popped, as far as this endpoint can tell.
    pub fn depth(&self) -> Result<u64> {
        Ok(match &self.end {
            End::Producer(p) => p.head - p.tail_local.read_u64(0)?,
            End::Consumer { rings, .. } => {
                let mut d = 0;
                for r in rings {
                    d += r.head_local.read_u64(0)? - r.tail;
                }
                d
            }
            End::LockingProducer(_) => return Err(Error::WrongRole),
            End::LockingConsumer(c) => c.head_local.read_u64(0)? - c.tail,
        })
    }

    fn put_u64(&self, dst: &GlobalMemorySlot, offset: u64, v: u64) -> Result<()> {
        self.scratch.write_u64(0, v)?;
        self.res.comm.memcpy(dst.into(), offset, (&self.scratch).into(), 0, 8)?;
        self.res.comm.fence(self.cfg.tag)?;
        Ok(())
    }

    /// Non-blocking; `Full` leaves the channel unchanged.
    pub fn push(&mut self, message: &LocalMemorySlot) -> Result<Push> {
        if !self.is_producer() {
            return Err(Error::WrongRole);
        }
        if message.size() != self.cfg.message_size {
            return Err(Error::SizeMismatch { expected: self.cfg.message_size, found: message.size() });
        }
        let (cap, msz, tag) = (self.cfg.capacity, self.cfg.message_size, self.cfg.tag);
        let comm = self.res.comm.clone();
        match &self.end {
            End::Producer(p) => {
                let tail = p.tail_local.read_u64(0)?;
                if p.head - tail >= cap {
                    return Ok(Push::Full);
                }
                comm.memcpy((&p.ring).into(), (p.head % cap) * msz, message.into(), 0, msz)?;
                comm.fence(tag)?;
                let (head, head_remote) = (p.head + 1, p.head_remote.clone());
                self.put_u64(&head_remote, 0, head)?;
                if let End::Producer(p) = &mut self.end {
                    p.head = head;
                }
                Ok(Push::Ok)
            }
            End::LockingProducer(_) => {
                self.lock()?;
                let r = self.push_locked(message);
                let unlocked = self.unlock();
                let r = r?;
                unlocked?;
                Ok(r)
            }
            _ => unreachable!("producer checked above"),
        }
    }

    fn push_locked(&self, message: &LocalMemorySlot) -> Result<Push> {
        let End::LockingProducer(p) = &self.end else { unreachable!() };
        let (cap, msz, tag) = (self.cfg.capacity, self.cfg.message_size, self.cfg.tag);
        let comm = &self.res.comm;
        let base = 16 * p.producers as u64;
        comm.memcpy((&p.view).into(), base, (&p.head).into(), 0, 8)?;
        comm.memcpy((&p.view).into(), base + 8, (&p.tail).into(), 0, 8)?;
        comm.fence(tag)?;
        let head = p.view.read_u64(base)?;
        let tail = p.view.read_u64(base + 8)?;
        if head - tail >= cap {
            return Ok(Push::Full);
        }
        comm.memcpy((&p.ring).into(), (head % cap) * msz, message.into(), 0, msz)?;
        comm.fence(tag)?;
        self.put_u64(&p.head, 0, head + 1)?;
        Ok(Push::Ok)
    }

    /// Bakery lock over the consumer-hosted `choosing[P] | number[P]` array.
    fn lock(&self) -> Result<()> {
        let End::LockingProducer(p) = &self.end else { unreachable!() };
        let (i, n) = (p.index, p.producers as u64);
        let choosing = |j: usize| 8 * j as u64;
        let number = |j: usize| 8 * (n + j as u64);
        let refresh = || -> Result<()> {
            self.res.comm.memcpy((&p.view).into(), 0, (&p.lock).into(), 0, 16 * n)?;
            self.res.comm.fence(self.cfg.tag)?;
            Ok(())
        };
        self.put_u64(&p.lock, choosing(i), 1)?;
        refresh()?;
        let mut max = 0;
        for j in 0..p.producers {
            max = max.max(p.view.read_u64(number(j))?);
        }
        let mine = max + 1;
        self.put_u64(&p.lock, number(i), mine)?;
        self.put_u64(&p.lock, choosing(i), 0)?;
        let backoff = Backoff::default();
        for j in (0..p.producers).filter(|&j| j != i) {
            let mut attempt = 0;
            loop {
                refresh()?;
                if p.view.read_u64(choosing(j))? == 0 {
                    break;
                }
                backoff.wait(attempt);
                attempt += 1;
            }
            loop {
                refresh()?;
                let theirs = p.view.read_u64(number(j))?;
                if theirs == 0 || (theirs, j) > (mine, i) {
                    break;
                }
                backoff.wait(attempt);
                attempt += 1;
            }
        }
        Ok(())
    }

    fn unlock(&self) -> Result<()> {
        let End::LockingProducer(p) = &self.end else { unreachable!() };
        self.put_u64(&p.lock, 8 * (p.producers + p.index) as u64, 0)
    }

    /// Copies `bytes` into an internal staging slot and pushes it.
    pub fn push_bytes(&mut self, bytes: &[u8]) -> Result<Push> {
        let staging = self.staging.clone().ok_or(Error::WrongRole)?;
        if bytes.len() as u64 != self.cfg.message_size {
            return Err(Error::SizeMismatch { expected: self.cfg.message_size, found: bytes.len() as u64 });
        }
        staging.write(0, bytes)?;
        self.push(&staging)
    }

    /// Retries `push` until it succeeds.
    pub fn push_blocking(&mut self, message: &LocalMemorySlot, backoff: Backoff) -> Result<()> {
        let mut attempt = 0;
        while self.push(message)? == Push::Full {
            backoff.wait(attempt);
            attempt += 1;
        }
        Ok(())
    }

    pub fn push_bytes_blocking(&mut self, bytes: &[u8], backoff: Backoff) -> Result<()> {
        let mut attempt = 0;
        while self.push_bytes(bytes)? == Push::Full {
            backoff.wait(attempt);
            attempt += 1;
        }
        Ok(())
    }

    /// The oldest message, without consuming it. Multi-ring consumers pick
    /// the next non-empty ring round-robin; the following `pop` consumes
    /// the message returned here.
    pub fn peek(&mut self) -> Result<Option<Vec<u8>>> {
        let msz = self.cfg.message_size;
        let cap = self.cfg.capacity;
        match &mut self.end {
            End::Consumer { rings, cursor, peeked } => {
                let n = rings.len();
                let start = peeked.unwrap_or(*cursor);
                for k in 0..n {
                    let idx = (start + k) % n;
                    let r = &rings[idx];
                    if r.head_local.read_u64(0)? > r.tail {
                        *peeked = Some(idx);
                        return Ok(Some(r.ring.read((r.tail % cap) * msz, msz)?));
                    }
                }
                Ok(None)
            }
            End::LockingConsumer(c) => {
                if c.head_local.read_u64(0)? == c.tail {
                    return Ok(None);
                }
                Ok(Some(c.ring.read((c.tail % cap) * msz, msz)?))
            }
            _ => Err(Error::WrongRole),
        }
    }

    pub fn pop(&mut self) -> Result<()> {
        match &mut self.end {
            End::Consumer { .. } => {
                if self.peek()?.is_none() {
                    return Err(Error::Empty);
                }
                let End::Consumer { rings, cursor, peeked } = &mut self.end else { unreachable!() };
                let idx = peeked.take().expect("peek found a message");
                *cursor = (idx + 1) % rings.len();
                let r = &mut rings[idx];
                r.tail += 1;
                let (tail, dst) = (r.tail, r.tail_remote.clone());
                self.put_u64(&dst, 0, tail)
            }
            End::LockingConsumer(c) => {
                if c.head_local.read_u64(0)? == c.tail {
                    return Err(Error::Empty);
                }
                c.tail += 1;
                c.tail_local.write_u64(0, c.tail)?;
                Ok(())
            }
            _ => Err(Error::WrongRole),
        }
    }

    /// Waits for a message, returns it and consumes it.
    pub fn pop_blocking(&mut self, backoff: Backoff) -> Result<Vec<u8>> {
        let mut attempt = 0;
        loop {
            if let Some(m) = self.peek()? {
                self.pop()?;
                return Ok(m);
            }
            backoff.wait(attempt);
            attempt += 1;
        }
    }
}
