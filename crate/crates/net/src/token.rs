//! Metadata a peer needs to reach an exposed buffer.

use hicr_core::{HicrError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteToken {
    pub owner: u64,
    pub buffer_id: u64,
    pub size: u64,
    pub owner_addr: String,
}

impl RemoteToken {
    /// `owner:u64le | bufferId:u64le | size:u64le | addr`
    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(24 + self.owner_addr.len());
        v.extend_from_slice(&self.owner.to_le_bytes());
        v.extend_from_slice(&self.buffer_id.to_le_bytes());
        v.extend_from_slice(&self.size.to_le_bytes());
        v.extend_from_slice(self.owner_addr.as_bytes());
        v
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < 24 {
            return Err(HicrError::Protocol("remote token too short".into()));
        }
        let u = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let owner_addr =
            String::from_utf8(b[24..].to_vec()).map_err(|_| HicrError::Protocol("remote token address".into()))?;
        Ok(Self { owner: u(0), buffer_id: u(8), size: u(16), owner_addr })
    }
}
