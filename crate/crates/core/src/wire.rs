//! Framed JSON messages: 4-byte big-endian length, then one JSON object
//! tagged by `type`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::bloom::CbfDigest;
use crate::icn::packet::{ContentObject, Interest};
use crate::icn::Nack;
use crate::naming::Name;
use crate::trust::{Certificate, TrustEnvelope};

/// Largest frame accepted from a peer.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeleteItem {
    pub name: Name,
    pub signature: TrustEnvelope,
}

/// Payload signed by the owner to authorise removal of `name`.
pub const DELETE_TAG: &[u8] = b"DELETE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "kebab-case")]
pub enum ItemStatus {
    Inserted,
    Replaced,
    Deleted,
    NotFound,
    Rejected(String),
}

impl ItemStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ItemStatus::Inserted | ItemStatus::Replaced | ItemStatus::Deleted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Frame {
    Interest(Interest),
    Content(ContentObject),
    Nack(Nack),
    Announce { prefix: Name },
    Hello { label: String },
    BulkInsert { items: Vec<ContentObject> },
    BulkDelete { items: Vec<DeleteItem> },
    BulkReply { statuses: Vec<ItemStatus> },
    BfQuery { prefixes: Vec<String> },
    BfReply { bits: Vec<bool> },
    DigestRequest,
    Digest { digest: CbfDigest },
    PublishCert { cert: Certificate },
    Stats,
    StatsReply { stats: serde_json::Value },
    Error { message: String },
    Ok,
    Shutdown,
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        serde_json::to_vec(self).map_or(0, |v| v.len() + 4)
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let body = serde_json::to_vec(frame)?;
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Frame>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
