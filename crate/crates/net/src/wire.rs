//! Framed wire protocol: `length:u32le | msgType:u8 | payload`, all integers
//! little-endian, strings as `len:u32le | utf8`.

use std::io::{self, Read, Write};

use hicr_core::{HicrError, Result};

pub const MAX_FRAME_PAYLOAD: usize = 16 * 1024 * 1024;
/// Bytes of a PUT payload preceding the data.
pub const PUT_HEADER_LEN: usize = 32;
/// Largest data chunk carried by one PUT or GET_RESP frame.
pub const MAX_CHUNK: usize = MAX_FRAME_PAYLOAD - PUT_HEADER_LEN;
pub const UNASSIGNED_ID: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    PeerTable = 2,
    ExchangeGather = 3,
    ExchangeTable = 4,
    Put = 5,
    GetReq = 6,
    GetResp = 7,
    GetNack = 8,
    FenceToken = 9,
    SpawnAck = 10,
    TopologyReport = 11,
    RpcReq = 12,
    RpcResp = 13,
    Bye = 14,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MsgType::*;
        Some(match v {
            1 => Hello,
            2 => PeerTable,
            3 => ExchangeGather,
            4 => ExchangeTable,
            5 => Put,
            6 => GetReq,
            7 => GetResp,
            8 => GetNack,
            9 => FenceToken,
            10 => SpawnAck,
            11 => TopologyReport,
            12 => RpcReq,
            13 => RpcResp,
            14 => Bye,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherEntry {
    pub key: u64,
    pub size: u64,
    pub buffer_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableEntry {
    pub key: u64,
    pub owner: u64,
    pub size: u64,
    pub buffer_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExchangeOutcome {
    Table(Vec<TableEntry>),
    DuplicateKey(u64),
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// First frame on every connection. `id` is `UNASSIGNED_ID` for an
    /// instance joining at runtime that has not been admitted yet.
    Hello {
        id: u64,
        joined: bool,
        listen_addr: String,
    },
    /// `you` is the recipient's own id.
    PeerTable {
        you: u64,
        root: u64,
        peers: Vec<(u64, String)>,
    },
    ExchangeGather {
        tag: u64,
        round: u64,
        from: u64,
        entries: Vec<GatherEntry>,
    },
    ExchangeTable {
        tag: u64,
        round: u64,
        outcome: ExchangeOutcome,
    },
    Put {
        tag: u64,
        buffer_id: u64,
        offset: u64,
        seq: u32,
        total_seq: u32,
        data: Vec<u8>,
    },
    GetReq {
        req_id: u64,
        buffer_id: u64,
        offset: u64,
        size: u64,
    },
    GetResp {
        req_id: u64,
        data: Vec<u8>,
    },
    GetNack {
        req_id: u64,
        reason: String,
    },
    /// `ack = false`: sender announces `count` frames sent under `tag` on
    /// this connection. `ack = true`: receiver reports `count` applied and
    /// `nacks` rejected.
    FenceToken {
        ack: bool,
        tag: u64,
        fence_id: u64,
        count: u64,
        nacks: u64,
    },
    SpawnAck {
        request_id: u64,
        instance: u64,
        ok: bool,
        message: String,
    },
    TopologyReport {
        request_id: u64,
        spawner: u64,
        topology: String,
        template: String,
    },
    RpcReq {
        seq: u64,
        name_hash: u64,
        arg: Vec<u8>,
    },
    RpcResp {
        seq: u64,
        status: u8,
        ret: Vec<u8>,
    },
    Bye,
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
        self
    }
    fn blob(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
        self
    }
}

struct Dec<'a>(&'a [u8]);

fn short() -> HicrError {
    HicrError::Protocol("truncated payload".into())
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(short());
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn count(&mut self, min_item: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.0.len() {
            return Err(short());
        }
        Ok(n)
    }
    fn blob(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.blob()?).map_err(|_| HicrError::Protocol("invalid utf-8".into()))
    }
    fn rest(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.0).to_vec()
    }
    fn end(&self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(HicrError::Protocol("trailing bytes in payload".into()))
        }
    }
}

/// Fixed part of a PUT payload; the data follows.
pub fn put_header(tag: u64, buffer_id: u64, offset: u64, seq: u32, total_seq: u32) -> [u8; PUT_HEADER_LEN] {
    let mut h = [0u8; PUT_HEADER_LEN];
    h[0..8].copy_from_slice(&tag.to_le_bytes());
    h[8..16].copy_from_slice(&buffer_id.to_le_bytes());
    h[16..24].copy_from_slice(&offset.to_le_bytes());
    h[24..28].copy_from_slice(&seq.to_le_bytes());
    h[28..32].copy_from_slice(&total_seq.to_le_bytes());
    h
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Hello { .. } => MsgType::Hello,
            Message::PeerTable { .. } => MsgType::PeerTable,
            Message::ExchangeGather { .. } => MsgType::ExchangeGather,
            Message::ExchangeTable { .. } => MsgType::ExchangeTable,
            Message::Put { .. } => MsgType::Put,
            Message::GetReq { .. } => MsgType::GetReq,
            Message::GetResp { .. } => MsgType::GetResp,
            Message::GetNack { .. } => MsgType::GetNack,
            Message::FenceToken { .. } => MsgType::FenceToken,
            Message::SpawnAck { .. } => MsgType::SpawnAck,
            Message::TopologyReport { .. } => MsgType::TopologyReport,
            Message::RpcReq { .. } => MsgType::RpcReq,
            Message::RpcResp { .. } => MsgType::RpcResp,
            Message::Bye => MsgType::Bye,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut e = Enc::default();
        match self {
            Message::Hello { id, joined, listen_addr } => {
                e.u64(*id).u8(*joined as u8).str(listen_addr);
            }
            Message::PeerTable { you, root, peers } => {
                e.u64(*you).u64(*root).u32(peers.len() as u32);
                for (id, addr) in peers {
                    e.u64(*id).str(addr);
                }
            }
            Message::ExchangeGather { tag, round, from, entries } => {
                e.u64(*tag).u64(*round).u64(*from).u32(entries.len() as u32);
                for g in entries {
                    e.u64(g.key).u64(g.size).u64(g.buffer_id);
                }
            }
            Message::ExchangeTable { tag, round, outcome } => {
                e.u64(*tag).u64(*round);
                match outcome {
                    ExchangeOutcome::Table(entries) => {
                        e.u8(0).u32(entries.len() as u32);
                        for t in entries {
                            e.u64(t.key).u64(t.owner).u64(t.size).u64(t.buffer_id);
                        }
                    }
                    ExchangeOutcome::DuplicateKey(k) => {
                        e.u8(1).u64(*k);
                    }
                    ExchangeOutcome::Mismatch(m) => {
                        e.u8(2).str(m);
                    }
                }
            }
            Message::Put { tag, buffer_id, offset, seq, total_seq, data } => {
                e.0.extend_from_slice(&put_header(*tag, *buffer_id, *offset, *seq, *total_seq));
                e.0.extend_from_slice(data);
            }
            Message::GetReq { req_id, buffer_id, offset, size } => {
                e.u64(*req_id).u64(*buffer_id).u64(*offset).u64(*size);
            }
            Message::GetResp { req_id, data } => {
                e.u64(*req_id);
                e.0.extend_from_slice(data);
            }
            Message::GetNack { req_id, reason } => {
                e.u64(*req_id).str(reason);
            }
            Message::FenceToken { ack, tag, fence_id, count, nacks } => {
                e.u8(*ack as u8).u64(*tag).u64(*fence_id).u64(*count).u64(*nacks);
            }
            Message::SpawnAck { request_id, instance, ok, message } => {
                e.u64(*request_id).u64(*instance).u8(*ok as u8).str(message);
            }
            Message::TopologyReport { request_id, spawner, topology, template } => {
                e.u64(*request_id).u64(*spawner).str(topology).str(template);
            }
            Message::RpcReq { seq, name_hash, arg } => {
                e.u64(*seq).u64(*name_hash).blob(arg);
            }
            Message::RpcResp { seq, status, ret } => {
                e.u64(*seq).u8(*status).blob(ret);
            }
            Message::Bye => {}
        }
        e.0
    }

    pub fn decode(msg_type: u8, payload: &[u8]) -> Result<Message> {
        let t = MsgType::from_u8(msg_type)
            .ok_or_else(|| HicrError::Protocol(format!("unknown message type {msg_type}")))?;
        let mut d = Dec(payload);
        let m = match t {
            MsgType::Hello => Message::Hello { id: d.u64()?, joined: d.u8()? != 0, listen_addr: d.str()? },
            MsgType::PeerTable => {
                let (you, root) = (d.u64()?, d.u64()?);
                let n = d.count(12)?;
                let mut peers = Vec::with_capacity(n);
                for _ in 0..n {
                    peers.push((d.u64()?, d.str()?));
                }
                Message::PeerTable { you, root, peers }
            }
            MsgType::ExchangeGather => {
                let (tag, round, from) = (d.u64()?, d.u64()?, d.u64()?);
                let n = d.count(24)?;
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    entries.push(GatherEntry { key: d.u64()?, size: d.u64()?, buffer_id: d.u64()? });
                }
                Message::ExchangeGather { tag, round, from, entries }
            }
            MsgType::ExchangeTable => {
                let (tag, round) = (d.u64()?, d.u64()?);
                let outcome = match d.u8()? {
                    0 => {
                        let n = d.count(32)?;
                        let mut entries = Vec::with_capacity(n);
                        for _ in 0..n {
                            entries.push(TableEntry {
                                key: d.u64()?,
                                owner: d.u64()?,
                                size: d.u64()?,
                                buffer_id: d.u64()?,
                            });
                        }
                        ExchangeOutcome::Table(entries)
                    }
                    1 => ExchangeOutcome::DuplicateKey(d.u64()?),
                    2 => ExchangeOutcome::Mismatch(d.str()?),
                    s => return Err(HicrError::Protocol(format!("unknown exchange status {s}"))),
                };
                Message::ExchangeTable { tag, round, outcome }
            }
            MsgType::Put => Message::Put {
                tag: d.u64()?,
                buffer_id: d.u64()?,
                offset: d.u64()?,
                seq: d.u32()?,
                total_seq: d.u32()?,
                data: d.rest(),
            },
            MsgType::GetReq => {
                Message::GetReq { req_id: d.u64()?, buffer_id: d.u64()?, offset: d.u64()?, size: d.u64()? }
            }
            MsgType::GetResp => Message::GetResp { req_id: d.u64()?, data: d.rest() },
            MsgType::GetNack => Message::GetNack { req_id: d.u64()?, reason: d.str()? },
            MsgType::FenceToken => Message::FenceToken {
                ack: d.u8()? != 0,
                tag: d.u64()?,
                fence_id: d.u64()?,
                count: d.u64()?,
                nacks: d.u64()?,
            },
            MsgType::SpawnAck => {
                Message::SpawnAck { request_id: d.u64()?, instance: d.u64()?, ok: d.u8()? != 0, message: d.str()? }
            }
            MsgType::TopologyReport => Message::TopologyReport {
                request_id: d.u64()?,
                spawner: d.u64()?,
                topology: d.str()?,
                template: d.str()?,
            },
            MsgType::RpcReq => Message::RpcReq { seq: d.u64()?, name_hash: d.u64()?, arg: d.blob()? },
            MsgType::RpcResp => Message::RpcResp { seq: d.u64()?, status: d.u8()?, ret: d.blob()? },
            MsgType::Bye => Message::Bye,
        };
        d.end()?;
        Ok(m)
    }

    /// Full frame including the 5-byte header.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(payload.len() + 5);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.push(self.msg_type() as u8);
        out.extend_from_slice(&payload);
        out
    }
}

/// Writes one frame whose payload is the concatenation of `parts`.
pub fn write_frame(w: &mut impl Write, msg_type: MsgType, parts: &[&[u8]]) -> io::Result<()> {
    let len: usize = parts.iter().map(|p| p.len()).sum();
    if len > MAX_FRAME_PAYLOAD {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame payload exceeds limit"));
    }
    let mut header = [0u8; 5];
    header[..4].copy_from_slice(&(len as u32).to_le_bytes());
    header[4] = msg_type as u8;
    if len <= 64 * 1024 {
        let mut buf = Vec::with_capacity(5 + len);
        buf.extend_from_slice(&header);
        for p in parts {
            buf.extend_from_slice(p);
        }
        w.write_all(&buf)
    } else {
        w.write_all(&header)?;
        for p in parts {
            w.write_all(p)?;
        }
        Ok(())
    }
}

pub fn write_message(w: &mut impl Write, m: &Message) -> io::Result<()> {
    write_frame(w, m.msg_type(), &[&m.encode_payload()])
}

pub enum RawFrame {
    Frame {
        msg_type: u8,
        payload: Vec<u8>,
    },
    /// Header announced more than the payload limit; the stream cannot be resynchronized.
    Oversized(u32),
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<RawFrame>> {
    let mut header = [0u8; 5];
    match r.read_exact(&mut header[..1]) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    r.read_exact(&mut header[1..])?;
    let len = u32::from_le_bytes(header[..4].try_into().unwrap());
    if len as usize > MAX_FRAME_PAYLOAD {
        return Ok(Some(RawFrame::Oversized(len)));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(RawFrame::Frame { msg_type: header[4], payload }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_layout_is_bit_exact() {
        let m = Message::Put { tag: 1, buffer_id: 2, offset: 3, seq: 4, total_seq: 5, data: vec![0xAA, 0xBB] };
        let f = m.encode();
        assert_eq!(&f[..5], &[34, 0, 0, 0, 5]);
        assert_eq!(&f[5..13], &1u64.to_le_bytes());
        assert_eq!(&f[13..21], &2u64.to_le_bytes());
        assert_eq!(&f[21..29], &3u64.to_le_bytes());
        assert_eq!(&f[29..33], &4u32.to_le_bytes());
        assert_eq!(&f[33..37], &5u32.to_le_bytes());
        assert_eq!(&f[37..], &[0xAA, 0xBB]);
    }

    #[test]
    fn rpc_layout_is_bit_exact() {
        let f = Message::RpcReq { seq: 7, name_hash: 9, arg: vec![1, 2, 3] }.encode();
        assert_eq!(f[4], 12);
        assert_eq!(&f[5..13], &7u64.to_le_bytes());
        assert_eq!(&f[13..21], &9u64.to_le_bytes());
        assert_eq!(&f[21..25], &3u32.to_le_bytes());
        assert_eq!(&f[25..], &[1, 2, 3]);
        let r = Message::RpcResp { seq: 7, status: 0, ret: vec![4] }.encode();
        assert_eq!(&r[..5], &[14, 0, 0, 0, 13]);
        assert_eq!(&r[13..], &[0, 1, 0, 0, 0, 4]);
    }

    #[test]
    fn oversized_header_detected() {
        let mut bytes = ((MAX_FRAME_PAYLOAD + 1) as u32).to_le_bytes().to_vec();
        bytes.push(5);
        assert!(matches!(read_frame(&mut &bytes[..]).unwrap(), Some(RawFrame::Oversized(_))));
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
    }

    #[test]
    fn unknown_type_and_garbage_rejected() {
        assert!(Message::decode(0, &[]).is_err());
        assert!(Message::decode(15, &[]).is_err());
        assert!(Message::decode(MsgType::GetReq as u8, &[1, 2]).is_err());
        assert!(Message::decode(MsgType::Bye as u8, &[1]).is_err());
    }
}
