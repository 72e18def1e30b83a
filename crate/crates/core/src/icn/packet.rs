use serde::{Deserialize, Serialize};

use crate::naming::{segment_name, split_segment, Name};
use crate::trust::{Credentials, TrustEnvelope};

/// Fixed per-packet overhead added to payload and name lengths when a
/// message is charged on a simulated link.
pub const HEADER_BYTES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interest {
    pub name: Name,
    pub nonce: u64,
    #[serde(rename = "lifetimeMs", default, skip_serializing_if = "Option::is_none")]
    pub lifetime_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<TrustEnvelope>,
}

impl Interest {
    pub fn new(name: Name, nonce: u64) -> Self {
        Interest { name, nonce, lifetime_ms: None, signature: None }
    }

    /// Bytes covered by an interest signature besides the name.
    pub fn signed_payload(nonce: u64) -> [u8; 8] {
        nonce.to_be_bytes()
    }

    pub fn signed(name: Name, nonce: u64, creds: &Credentials) -> Self {
        let signature = Some(creds.sign(&name, &Self::signed_payload(nonce)));
        Interest { name, nonce, lifetime_ms: None, signature }
    }

    pub fn wire_size(&self) -> usize {
        HEADER_BYTES + self.name.to_string().len() + self.signature.as_ref().map_or(0, |s| 64 + s.key_locator.to_string().len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentObject {
    pub name: Name,
    #[serde(with = "payload_b64")]
    pub payload: Vec<u8>,
    #[serde(rename = "freshnessMs")]
    pub freshness_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<TrustEnvelope>,
    #[serde(rename = "finalSegment", default, skip_serializing_if = "Option::is_none")]
    pub final_segment: Option<u64>,
}

impl ContentObject {
    pub fn new(name: Name, payload: Vec<u8>, freshness_ms: u64) -> Self {
        ContentObject { name, payload, freshness_ms, signature: None, final_segment: None }
    }

    pub fn signed_by(mut self, creds: &Credentials) -> Self {
        self.signature = Some(creds.sign(&self.name, &self.payload));
        self
    }

    pub fn wire_size(&self) -> usize {
        HEADER_BYTES + self.name.to_string().len() + self.payload.len() + self.signature.as_ref().map_or(0, |s| 64 + s.key_locator.to_string().len())
    }
}

mod payload_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

/// Splits `payload` into `seg=<i>` contents of at most `segment_size` bytes,
/// each signed on its own when `signer` is given. Empty payloads still yield
/// segment 0.
pub fn segment(base: &Name, payload: &[u8], segment_size: usize, freshness_ms: u64, signer: Option<&Credentials>) -> Vec<ContentObject> {
    let chunks: Vec<&[u8]> = if payload.is_empty() { vec![&[][..]] } else { payload.chunks(segment_size.max(1)).collect() };
    let last = chunks.len() as u64 - 1;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, chunk)| {
            let mut co = ContentObject::new(segment_name(base, i as u64), chunk.to_vec(), freshness_ms);
            co.final_segment = Some(last);
            match signer {
                Some(c) => co.signed_by(c),
                None => co,
            }
        })
        .collect()
}

/// Concatenates segments ordered by index; `None` if any is missing.
pub fn reassemble(segments: &[ContentObject]) -> Option<Vec<u8>> {
    let mut indexed: Vec<(u64, &ContentObject)> = segments
        .iter()
        .map(|s| split_segment(&s.name).map(|(_, i)| (i, s)))
        .collect::<Option<_>>()?;
    indexed.sort_by_key(|(i, _)| *i);
    let final_seg = indexed.first()?.1.final_segment?;
    if indexed.len() as u64 != final_seg + 1 || indexed.iter().enumerate().any(|(k, (i, _))| *i != k as u64) {
        return None;
    }
    Some(indexed.into_iter().flat_map(|(_, s)| s.payload.iter().copied()).collect())
}
