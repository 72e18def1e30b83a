//! Name-based forwarding substrate.
//!
//! Nodes run a [`Forwarder`]; producers plug in as [`App`]s. The same
//! forwarder and apps run inside the discrete-event [`sim::SimNetwork`] and
//! the TCP router in [`socket`].

pub mod forwarder;
pub mod packet;
pub mod sim;
pub mod socket;
pub mod tables;

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use forwarder::{Forwarder, ForwarderStats, InterestGuard};
pub use packet::{ContentObject, Interest};

use crate::naming::Name;
use crate::trust::Credentials;
use crate::wire::Frame;

/// Where a packet enters or leaves a forwarder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Face {
    Link(usize),
    App,
    Consumer(u64),
    /// Requests the forwarder issues for itself (certificate fetches).
    Internal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NackReason {
    NoRoute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nack {
    pub name: Name,
    pub nonce: u64,
    pub reason: NackReason,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Packet {
    Interest(Interest),
    Content(ContentObject),
    Nack(Nack),
}

impl Packet {
    pub fn wire_size(&self) -> usize {
        match self {
            Packet::Interest(i) => i.wire_size(),
            Packet::Content(c) => c.wire_size(),
            Packet::Nack(n) => packet::HEADER_BYTES + n.name.to_string().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IcnError {
    #[error("no route for {0}")]
    NoRoute(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("prefix {prefix} already announced by {owner}")]
    DuplicateAnnouncement { prefix: String, owner: String },
    #[error("unknown address {0}")]
    UnknownAddress(String),
    #[error("malformed content {0}")]
    Malformed(String),
    #[error("transport: {0}")]
    Transport(String),
}

/// Result of an application callback. Outputs are released once the
/// application has been busy for `busy_ms`; applications serialize their
/// work, so busy periods queue behind each other. Zero-cost work bypasses
/// the queue.
///
/// `reply` answers the direct request being handled; leaving it empty from
/// `on_direct` defers the answer, which a later callback delivers through
/// `late_replies` under the request's token.
#[derive(Debug, Default)]
pub struct Handled {
    pub busy_ms: f64,
    pub out: Vec<Packet>,
    pub reply: Option<Frame>,
    pub late_replies: Vec<(u64, Frame)>,
}

impl Handled {
    pub fn none() -> Self {
        Handled::default()
    }

    pub fn packets(out: Vec<Packet>) -> Self {
        Handled { out, ..Handled::default() }
    }

    pub fn reply(frame: Frame) -> Self {
        Handled { reply: Some(frame), ..Handled::default() }
    }
}

/// A producer attached to a node's application face.
pub trait App: Any + Send {
    fn on_interest(&mut self, now_ms: f64, interest: &Interest) -> Handled;

    fn on_content(&mut self, _now_ms: f64, _content: &ContentObject) -> Handled {
        Handled::none()
    }

    fn on_nack(&mut self, _now_ms: f64, _nack: &Nack) -> Handled {
        Handled::none()
    }

    /// Out-of-band request (bulk insert, membership queries, digests).
    fn on_direct(&mut self, _now_ms: f64, _token: u64, _msg: Frame) -> Handled {
        Handled::reply(Frame::Error { message: "unsupported request".into() })
    }

    /// Prefixes the application serves.
    fn prefixes(&self) -> Vec<Name>;

    /// Interests to express right after attachment.
    fn on_start(&mut self, _now_ms: f64) -> Vec<Packet> {
        Vec::new()
    }

    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Network address of a component, as carried in IP-RES answers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Address {
    pub host: String,
    pub port: u16,
}

impl std::fmt::Display for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone)]
pub struct FetchRequest {
    pub name: Name,
    /// Fetch `name/seg=0`, then the remaining segments.
    pub segmented: bool,
    pub signer: Option<Arc<Credentials>>,
}

impl FetchRequest {
    pub fn plain(name: Name) -> Self {
        FetchRequest { name, segmented: false, signer: None }
    }

    pub fn segmented(name: Name, signer: Option<Arc<Credentials>>) -> Self {
        FetchRequest { name, segmented: true, signer }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fetched {
    pub name: Name,
    pub payload: Vec<u8>,
    pub segments: Vec<ContentObject>,
    pub completed_ms: f64,
}

/// What the front end needs from the network, in either mode.
pub trait Substrate {
    fn now_ms(&self) -> f64;
    /// Accounts local processing time (advances the clock in simulation).
    fn charge(&mut self, ms: f64);
    /// Fetches all requests with at most `window` in flight; results keep
    /// the request order.
    fn fetch(&mut self, requests: Vec<FetchRequest>, window: usize) -> Vec<Result<Fetched, IcnError>>;
    fn call(&mut self, to: &Address, msg: Frame) -> Result<Frame, IcnError>;
}

pub(crate) fn assemble(name: &Name, segments: BTreeMap<u64, ContentObject>, completed_ms: f64) -> Result<Fetched, IcnError> {
    let segments: Vec<ContentObject> = segments.into_values().collect();
    let payload = if segments.len() == 1 && crate::naming::split_segment(&segments[0].name).is_none() {
        segments[0].payload.clone()
    } else {
        packet::reassemble(&segments).ok_or_else(|| IcnError::Malformed(name.to_string()))?
    };
    Ok(Fetched { name: name.clone(), payload, segments, completed_ms })
}
