//! Discrete-event network on a virtual millisecond clock.
//!
//! A packet sent on a link arrives after `latency + bytes * 8 / bandwidth`,
//! queueing behind earlier packets in the same direction. Applications
//! serialize their busy periods. Everything is deterministic for a seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::forwarder::{FwdOut, DEFAULT_LIFETIME_MS};
use super::packet::{ContentObject, Interest};
use super::tables::FibEntry;
use super::{assemble, Address, App, Face, FetchRequest, Fetched, Forwarder, ForwarderStats, Handled, IcnError, InterestGuard, Nack, Packet, Substrate};
use crate::naming::{segment_name, Name};
use crate::trust::Credentials;
use crate::wire::Frame;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkParams {
    #[serde(rename = "latencyMs")]
    pub latency_ms: f64,
    /// Bits per second; `f64::INFINITY` disables transmission delay.
    #[serde(rename = "bandwidthBps")]
    pub bandwidth_bps: f64,
}

impl LinkParams {
    /// Fast LAN: 10 µs, 100 Gbit/s.
    pub fn lan() -> Self {
        LinkParams { latency_ms: 0.01, bandwidth_bps: 100e9 }
    }

    pub fn ideal() -> Self {
        LinkParams { latency_ms: 0.0, bandwidth_bps: f64::INFINITY }
    }

    pub fn transmission_ms(&self, bytes: usize) -> f64 {
        if self.bandwidth_bps.is_infinite() {
            0.0
        } else {
            bytes as f64 * 8.0 / self.bandwidth_bps * 1000.0
        }
    }
}

struct Link {
    ends: [NodeId; 2],
    params: LinkParams,
    busy_until: [f64; 2],
}

struct Node {
    label: String,
    fwd: Forwarder,
    app: Option<Box<dyn App>>,
    app_busy_until: f64,
    app_busy_total: f64,
    links: Vec<usize>,
}

enum Event {
    Arrive { node: NodeId, face: Face, packet: Packet },
    ToApp { node: NodeId, packet: Packet },
    Release { node: NodeId, out: Vec<Packet>, replies: Vec<(u64, Frame)> },
    DirectHop { at: NodeId, dest: NodeId, call: u64, origin: NodeId, frame: Frame, bytes: usize, reply: bool },
    Timeout { consumer: u64, seg: u64, nonce: u64 },
}

struct Scheduled {
    at: f64,
    seq: u64,
    ev: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> Ordering {
        o.at.total_cmp(&self.at).then_with(|| o.seq.cmp(&self.seq))
    }
}

struct FetchState {
    node: NodeId,
    slot: usize,
    name: Name,
    segmented: bool,
    signer: Option<Arc<Credentials>>,
    received: BTreeMap<u64, ContentObject>,
    outstanding: HashMap<u64, (u64, u32)>,
    final_seg: Option<u64>,
}

pub struct SimNetwork {
    nodes: Vec<Node>,
    links: Vec<Link>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    rng: ChaCha8Rng,
    announced: BTreeMap<Name, NodeId>,
    routes: Option<Vec<Vec<Option<usize>>>>,
    addresses: HashMap<Address, NodeId>,
    fetches: HashMap<u64, FetchState>,
    results: HashMap<usize, Result<Fetched, IcnError>>,
    replies: HashMap<u64, Frame>,
    /// Direct requests awaiting a deferred answer: call id to origin.
    deferred: HashMap<u64, NodeId>,
    consumer_gen: u64,
    next_call: u64,
    retries: u32,
    trace: Sha256,
    events: u64,
}

impl SimNetwork {
    pub fn new(seed: u64) -> Self {
        SimNetwork {
            nodes: Vec::new(),
            links: Vec::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            announced: BTreeMap::new(),
            routes: None,
            addresses: HashMap::new(),
            fetches: HashMap::new(),
            results: HashMap::new(),
            replies: HashMap::new(),
            deferred: HashMap::new(),
            consumer_gen: 0,
            next_call: 0,
            retries: 1,
            trace: Sha256::new(),
            events: 0,
        }
    }

    pub fn add_node(&mut self, label: &str, cache_capacity: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            label: label.to_string(),
            fwd: Forwarder::new(cache_capacity, id as u64 + 1),
            app: None,
            app_busy_until: 0.0,
            app_busy_total: 0.0,
            links: Vec::new(),
        });
        id
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn label(&self, node: NodeId) -> &str {
        &self.nodes[node].label
    }

    pub fn find_node(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label)
    }

    pub fn add_link(&mut self, a: NodeId, b: NodeId, params: LinkParams) -> usize {
        let id = self.links.len();
        self.links.push(Link { ends: [a, b], params, busy_until: [0.0; 2] });
        self.nodes[a].links.push(id);
        self.nodes[b].links.push(id);
        self.routes = None;
        self.rebuild_fibs();
        id
    }

    pub fn register_address(&mut self, addr: Address, node: NodeId) {
        self.addresses.insert(addr, node);
    }

    pub fn node_at(&self, addr: &Address) -> Option<NodeId> {
        self.addresses.get(addr).copied()
    }

    pub fn set_guard(&mut self, node: NodeId, guard: Option<InterestGuard>) {
        self.nodes[node].fwd.set_guard(guard);
    }

    /// Attaches `app` to `node`, announcing its prefixes.
    pub fn attach(&mut self, node: NodeId, mut app: Box<dyn App>) -> Result<(), IcnError> {
        for p in app.prefixes() {
            self.announce(node, &p)?;
        }
        let start = app.on_start(self.now);
        self.nodes[node].app = Some(app);
        for p in start {
            self.feed(node, Face::App, p);
        }
        Ok(())
    }

    /// Detaches the application, withdrawing its prefixes and forgetting the
    /// interests it held.
    pub fn detach(&mut self, node: NodeId) -> Option<Box<dyn App>> {
        let app = self.nodes[node].app.take()?;
        let gone: Vec<Name> = self.announced.iter().filter(|(_, o)| **o == node).map(|(p, _)| p.clone()).collect();
        self.announced.retain(|_, owner| *owner != node);
        self.nodes[node].fwd.forget_app_interests();
        // Interests held by the departed producer can no longer be answered.
        for n in &mut self.nodes {
            n.fwd.pit.retain(|name, _| !gone.iter().any(|p| p.is_prefix_of(name)));
        }
        self.nodes[node].app_busy_until = self.now;
        self.rebuild_fibs();
        Some(app)
    }

    pub fn app<T: App>(&self, node: NodeId) -> Option<&T> {
        self.nodes[node].app.as_ref()?.as_any().downcast_ref()
    }

    pub fn app_mut<T: App>(&mut self, node: NodeId) -> Option<&mut T> {
        self.nodes[node].app.as_mut()?.as_any_mut().downcast_mut()
    }

    /// Routes `prefix` towards `node` from every other node.
    pub fn announce(&mut self, node: NodeId, prefix: &Name) -> Result<(), IcnError> {
        match self.announced.get(prefix) {
            Some(owner) if *owner != node => {
                return Err(IcnError::DuplicateAnnouncement { prefix: prefix.to_string(), owner: self.nodes[*owner].label.clone() })
            }
            Some(_) => return Ok(()),
            None => {}
        }
        self.announced.insert(prefix.clone(), node);
        self.install(prefix, node);
        Ok(())
    }

    pub fn announcements(&self) -> &BTreeMap<Name, NodeId> {
        &self.announced
    }

    fn install(&mut self, prefix: &Name, origin: NodeId) {
        self.ensure_routes();
        let routes = self.routes.as_ref().unwrap();
        for n in 0..self.nodes.len() {
            let next_hop = if n == origin {
                Face::App
            } else {
                match routes[n][origin] {
                    Some(l) => Face::Link(l),
                    None => continue,
                }
            };
            self.nodes[n].fwd.fib.insert(FibEntry { prefix: prefix.clone(), next_hop, origin });
        }
    }

    fn rebuild_fibs(&mut self) {
        for n in &mut self.nodes {
            n.fwd.fib.clear();
        }
        let all: Vec<(Name, NodeId)> = self.announced.iter().map(|(p, n)| (p.clone(), *n)).collect();
        for (p, n) in all {
            self.install(&p, n);
        }
    }

    /// Next-hop link from every node to every node, by least latency.
    fn ensure_routes(&mut self) {
        if self.routes.is_some() {
            return;
        }
        let n = self.nodes.len();
        let mut table = vec![vec![None; n]; n];
        for dst in 0..n {
            let mut dist = vec![f64::INFINITY; n];
            let mut via: Vec<Option<usize>> = vec![None; n];
            let mut done = vec![false; n];
            dist[dst] = 0.0;
            for _ in 0..n {
                let Some(u) = (0..n).filter(|&i| !done[i] && dist[i].is_finite()).min_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b))) else {
                    break;
                };
                done[u] = true;
                for &l in &self.nodes[u].links {
                    let link = &self.links[l];
                    let v = if link.ends[0] == u { link.ends[1] } else { link.ends[0] };
                    // Hop count breaks latency ties so zero-latency graphs still route.
                    let d = dist[u] + link.params.latency_ms + 1e-9;
                    if d < dist[v] {
                        dist[v] = d;
                        via[v] = Some(l);
                    }
                }
            }
            for src in 0..n {
                table[src][dst] = via[src];
            }
        }
        self.routes = Some(table);
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn stats(&self, node: NodeId) -> &ForwarderStats {
        &self.nodes[node].fwd.stats
    }

    pub fn reset_stats(&mut self) {
        for n in &mut self.nodes {
            n.fwd.stats = ForwarderStats::default();
        }
    }

    /// Total time the node's application has spent busy.
    pub fn app_busy_ms(&self, node: NodeId) -> f64 {
        self.nodes[node].app_busy_total
    }

    pub fn cache_len(&self, node: NodeId) -> usize {
        self.nodes[node].fwd.cs.len()
    }

    pub fn flush_caches(&mut self) {
        for n in &mut self.nodes {
            n.fwd.cs.clear();
        }
    }

    pub fn set_retries(&mut self, retries: u32) {
        self.retries = retries;
    }

    /// Digest of every event processed so far.
    pub fn trace_digest(&self) -> [u8; 32] {
        self.trace.clone().finalize().into()
    }

    pub fn events_processed(&self) -> u64 {
        self.events
    }

    fn schedule(&mut self, at: f64, ev: Event) {
        self.seq += 1;
        self.queue.push(Scheduled { at, seq: self.seq, ev });
    }

    fn record(&mut self, tag: u8, node: NodeId, name: Option<&Name>) {
        self.events += 1;
        self.trace.update(self.now.to_bits().to_be_bytes());
        self.trace.update([tag]);
        self.trace.update((node as u64).to_be_bytes());
        if let Some(n) = name {
            self.trace.update(n.to_string().as_bytes());
        }
    }

    fn stale(&self, ev: &Event) -> bool {
        match ev {
            Event::Timeout { consumer, seg, nonce } => {
                !self.fetches.get(consumer).is_some_and(|f| f.outstanding.get(seg).is_some_and(|(n, _)| n == nonce))
            }
            _ => false,
        }
    }

    /// Processes the next event; false when the queue holds nothing live.
    fn step(&mut self, until: Option<f64>) -> bool {
        loop {
            let Some(top) = self.queue.peek() else { return false };
            if until.is_some_and(|u| top.at > u) {
                return false;
            }
            let s = self.queue.pop().unwrap();
            if self.stale(&s.ev) {
                continue;
            }
            self.now = self.now.max(s.at);
            self.process(s.ev);
            return true;
        }
    }

    pub fn advance(&mut self, ms: f64) {
        let target = self.now + ms.max(0.0);
        while self.step(Some(target)) {}
        self.now = target;
    }

    pub fn run_until_idle(&mut self) {
        while self.step(None) {}
    }

    fn process(&mut self, ev: Event) {
        match ev {
            Event::Arrive { node, face, packet } => {
                let name = packet_name(&packet).clone();
                self.record(1, node, Some(&name));
                self.feed(node, face, packet);
            }
            Event::ToApp { node, packet } => {
                self.record(2, node, Some(packet_name(&packet)));
                let now = self.now;
                let Some(app) = self.nodes[node].app.as_mut() else { return };
                let h = match &packet {
                    Packet::Interest(i) => app.on_interest(now, i),
                    Packet::Content(c) => app.on_content(now, c),
                    Packet::Nack(n) => app.on_nack(now, n),
                };
                self.finish(node, h, None);
            }
            Event::Release { node, out, replies } => {
                self.record(3, node, None);
                self.process_release(node, out, replies);
            }
            Event::DirectHop { at, dest, call, origin, frame, bytes, reply } => {
                self.record(4, at, None);
                self.hop(at, dest, call, origin, frame, bytes, reply);
            }
            Event::Timeout { consumer, seg, .. } => {
                self.record(5, 0, None);
                let retries = self.retries;
                let Some(f) = self.fetches.get_mut(&consumer) else { return };
                let attempts = f.outstanding[&seg].1;
                if attempts < retries {
                    self.send_segment(consumer, seg, attempts + 1);
                } else {
                    let f = self.fetches.remove(&consumer).unwrap();
                    let what = if f.segmented { segment_name(&f.name, seg) } else { f.name.clone() };
                    self.results.insert(f.slot, Err(IcnError::Timeout(what.to_string())));
                }
            }
        }
    }

    /// Moves a direct frame one hop towards `dest`, or delivers it.
    #[allow(clippy::too_many_arguments)]
    fn hop(&mut self, at: NodeId, dest: NodeId, call: u64, origin: NodeId, frame: Frame, bytes: usize, reply: bool) {
        if at == dest {
            if reply {
                self.replies.insert(call, frame);
                return;
            }
            let now = self.now;
            self.deferred.insert(call, origin);
            let h = match self.nodes[at].app.as_mut() {
                Some(app) => app.on_direct(now, call, frame),
                None => Handled::reply(Frame::Error { message: format!("no application at {}", self.nodes[at].label) }),
            };
            self.finish(at, h, Some(call));
            return;
        }
        self.ensure_routes();
        let Some(l) = self.routes.as_ref().unwrap()[at][dest] else {
            if !reply {
                let bytes = 64;
                self.hop(at, origin, call, dest, Frame::Error { message: "unreachable".into() }, bytes, true);
            }
            return;
        };
        let (next, arrival) = self.transmit(l, at, bytes);
        self.schedule(arrival, Event::DirectHop { at: next, dest, call, origin, frame, bytes, reply });
    }

    /// Applies the busy period of an application callback.
    fn finish(&mut self, node: NodeId, h: Handled, call: Option<u64>) {
        let mut replies = h.late_replies;
        if let (Some(c), Some(f)) = (call, h.reply) {
            replies.push((c, f));
        }
        if h.busy_ms > 0.0 {
            let n = &mut self.nodes[node];
            let start = n.app_busy_until.max(self.now);
            n.app_busy_until = start + h.busy_ms;
            n.app_busy_total += h.busy_ms;
            let at = n.app_busy_until;
            self.schedule(at, Event::Release { node, out: h.out, replies });
        } else {
            self.process_release(node, h.out, replies);
        }
    }

    fn process_release(&mut self, node: NodeId, out: Vec<Packet>, replies: Vec<(u64, Frame)>) {
        for p in out {
            self.feed(node, Face::App, p);
        }
        for (call, frame) in replies {
            let Some(origin) = self.deferred.remove(&call) else { continue };
            let bytes = frame.encoded_len();
            self.hop(node, origin, call, node, frame, bytes, true);
        }
    }

    /// Runs `f` against the application at `node` outside any callback and
    /// releases whatever it produces.
    pub fn with_app<T: App, R>(&mut self, node: NodeId, f: impl FnOnce(&mut T, f64) -> (R, Handled)) -> Option<R> {
        let now = self.now;
        let app = self.nodes[node].app.as_mut()?.as_any_mut().downcast_mut::<T>()?;
        let (r, h) = f(app, now);
        self.finish(node, h, None);
        Some(r)
    }

    /// Hands an incoming packet to the node's forwarder.
    fn feed(&mut self, node: NodeId, face: Face, packet: Packet) {
        let now = self.now;
        let fwd = &mut self.nodes[node].fwd;
        let outs = match packet {
            Packet::Interest(i) => fwd.on_interest(now, i, face),
            Packet::Content(c) => fwd.on_content(now, c, face),
            Packet::Nack(n) => fwd.on_nack(now, n, face),
        };
        for FwdOut::Send(f, p) in outs {
            self.emit(node, f, p);
        }
    }

    fn emit(&mut self, node: NodeId, face: Face, packet: Packet) {
        match face {
            Face::Link(l) => {
                let (next, arrival) = self.transmit(l, node, packet.wire_size());
                self.schedule(arrival, Event::Arrive { node: next, face: Face::Link(l), packet });
            }
            Face::App => {
                let now = self.now;
                self.schedule(now, Event::ToApp { node, packet });
            }
            Face::Consumer(id) => self.consumer_receive(id, packet),
            Face::Internal => {}
        }
    }

    fn transmit(&mut self, l: usize, from: NodeId, bytes: usize) -> (NodeId, f64) {
        let now = self.now;
        let link = &mut self.links[l];
        let dir = usize::from(link.ends[0] != from);
        let start = link.busy_until[dir].max(now);
        let tx = link.params.transmission_ms(bytes);
        link.busy_until[dir] = start + tx;
        (link.ends[1 - dir], start + tx + link.params.latency_ms)
    }

    fn consumer_receive(&mut self, id: u64, packet: Packet) {
        let Some(f) = self.fetches.get_mut(&id) else { return };
        match packet {
            Packet::Content(co) => {
                let seg = if f.segmented {
                    match crate::naming::split_segment(&co.name) {
                        Some((_, s)) => s,
                        None => return,
                    }
                } else {
                    0
                };
                if f.outstanding.remove(&seg).is_none() {
                    return;
                }
                let first = seg == 0 && f.final_seg.is_none();
                let final_seg = co.final_segment.unwrap_or(0);
                f.received.insert(seg, co);
                if f.segmented && first {
                    f.final_seg = Some(final_seg);
                    for s in 1..=final_seg {
                        self.send_segment(id, s, 0);
                    }
                }
                let Some(f) = self.fetches.get(&id) else { return };
                if f.outstanding.is_empty() && f.received.len() as u64 == f.final_seg.unwrap_or(0) + 1 {
                    let f = self.fetches.remove(&id).unwrap();
                    let res = assemble(&f.name, f.received, self.now);
                    self.results.insert(f.slot, res);
                }
            }
            Packet::Nack(n) => {
                let f = self.fetches.remove(&id).unwrap();
                self.results.insert(f.slot, Err(IcnError::NoRoute(n.name.to_string())));
            }
            Packet::Interest(_) => {}
        }
    }

    fn send_segment(&mut self, id: u64, seg: u64, attempt: u32) {
        let nonce = self.rng.next_u64();
        let f = self.fetches.get_mut(&id).unwrap();
        let name = if f.segmented { segment_name(&f.name, seg) } else { f.name.clone() };
        let mut interest = match &f.signer {
            Some(c) => Interest::signed(name, nonce, c),
            None => Interest::new(name, nonce),
        };
        interest.lifetime_ms = Some(DEFAULT_LIFETIME_MS);
        f.outstanding.insert(seg, (nonce, attempt));
        let node = f.node;
        let at = self.now + DEFAULT_LIFETIME_MS as f64;
        self.schedule(at, Event::Timeout { consumer: id, seg, nonce });
        self.feed(node, Face::Consumer(id), Packet::Interest(interest));
    }

    /// Fetches every request from `node` with at most `window` outstanding.
    pub fn fetch(&mut self, node: NodeId, requests: Vec<FetchRequest>, window: usize) -> Vec<Result<Fetched, IcnError>> {
        self.consumer_gen += 1;
        let base = self.consumer_gen << 32;
        let total = requests.len();
        let mut pending = requests.into_iter().enumerate();
        let window = window.max(1);
        let mut active: Vec<u64> = Vec::new();
        loop {
            active.retain(|id| self.fetches.contains_key(id));
            while active.len() < window {
                let Some((slot, r)) = pending.next() else { break };
                let id = base | slot as u64;
                self.fetches.insert(
                    id,
                    FetchState {
                        node,
                        slot,
                        name: r.name,
                        segmented: r.segmented,
                        signer: r.signer,
                        received: BTreeMap::new(),
                        outstanding: HashMap::new(),
                        final_seg: None,
                    },
                );
                active.push(id);
                self.send_segment(id, 0, 0);
            }
            active.retain(|id| self.fetches.contains_key(id));
            if active.is_empty() && self.results.len() >= total {
                break;
            }
            if !active.is_empty() && !self.step(None) {
                for id in active.drain(..) {
                    let f = self.fetches.remove(&id).unwrap();
                    self.results.insert(f.slot, Err(IcnError::Timeout(f.name.to_string())));
                }
            }
        }
        let mut results = std::mem::take(&mut self.results);
        (0..total).map(|i| results.remove(&i).unwrap()).collect()
    }

    pub fn get(&mut self, node: NodeId, request: FetchRequest) -> Result<Fetched, IcnError> {
        self.fetch(node, vec![request], 1).pop().unwrap()
    }

    /// Sends an out-of-band request from `from` to the application at `to`
    /// and waits for its reply.
    pub fn call(&mut self, from: NodeId, to: NodeId, frame: Frame) -> Result<Frame, IcnError> {
        self.next_call += 1;
        let call = self.next_call;
        let bytes = frame.encoded_len();
        self.hop(from, to, call, from, frame, bytes, false);
        while !self.replies.contains_key(&call) {
            if !self.step(None) {
                self.deferred.remove(&call);
                return Err(IcnError::Timeout(format!("reply from {}", self.nodes[to].label)));
            }
        }
        Ok(self.replies.remove(&call).unwrap())
    }

    pub fn endpoint(&mut self, node: NodeId) -> SimEndpoint<'_> {
        SimEndpoint { net: self, node }
    }
}

fn packet_name(p: &Packet) -> &Name {
    match p {
        Packet::Interest(i) => &i.name,
        Packet::Content(c) => &c.name,
        Packet::Nack(Nack { name, .. }) => name,
    }
}

/// A simulated node seen through the [`Substrate`] interface.
pub struct SimEndpoint<'a> {
    pub net: &'a mut SimNetwork,
    pub node: NodeId,
}

impl Substrate for SimEndpoint<'_> {
    fn now_ms(&self) -> f64 {
        self.net.now()
    }

    fn charge(&mut self, ms: f64) {
        self.net.advance(ms);
    }

    fn fetch(&mut self, requests: Vec<FetchRequest>, window: usize) -> Vec<Result<Fetched, IcnError>> {
        self.net.fetch(self.node, requests, window)
    }

    fn call(&mut self, to: &Address, msg: Frame) -> Result<Frame, IcnError> {
        let target = self.net.node_at(to).ok_or_else(|| IcnError::UnknownAddress(to.to_string()))?;
        self.net.call(self.node, target, msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icn::packet::segment;
    use std::any::Any;

    /// Serves fixed payloads under one prefix, counting hits.
    struct Producer {
        prefix: Name,
        payload: Vec<u8>,
        freshness: u64,
        hits: u64,
        delay: f64,
    }

    impl App for Producer {
        fn on_interest(&mut self, _now: f64, i: &Interest) -> Handled {
            self.hits += 1;
            let out = match crate::naming::split_segment(&i.name) {
                Some((base, _)) => {
                    segment(&base, &self.payload, 8000, self.freshness, None).into_iter().filter(|s| s.name == i.name).map(Packet::Content).collect()
                }
                None => vec![Packet::Content(ContentObject::new(i.name.clone(), self.payload.clone(), self.freshness))],
            };
            Handled { busy_ms: self.delay, out, ..Handled::default() }
        }
        fn prefixes(&self) -> Vec<Name> {
            vec![self.prefix.clone()]
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    fn name(s: &str) -> Name {
        s.parse().unwrap()
    }

    fn producer(prefix: &str, payload: Vec<u8>, freshness: u64) -> Box<Producer> {
        Box::new(Producer { prefix: name(prefix), payload, freshness, hits: 0, delay: 1.0 })
    }

    fn star(net: &mut SimNetwork, leaves: usize, params: LinkParams, cache: usize) -> (NodeId, Vec<NodeId>) {
        let hub = net.add_node("switch", 0);
        let nodes = (0..leaves)
            .map(|i| {
                let n = net.add_node(&format!("n{i}"), cache);
                net.add_link(hub, n, params);
                n
            })
            .collect();
        (hub, nodes)
    }

    #[test]
    fn longest_prefix_routes_to_owner() {
        let mut net = SimNetwork::new(1);
        let (_, n) = star(&mut net, 3, LinkParams::lan(), 0);
        net.attach(n[1], producer("ndn:/OGB/12/41", vec![1; 10], 1000)).unwrap();
        net.attach(n[2], producer("ndn:/OGB/13/41", vec![2; 10], 1000)).unwrap();
        let got = net.get(n[0], FetchRequest::segmented(name("ndn:/OGB/12/41/58/19/GPS-ID/TILE/Foo/ShopApp"), None)).unwrap();
        assert_eq!(got.payload, vec![1; 10]);
        assert_eq!(net.app::<Producer>(n[1]).unwrap().hits, 1);
        assert_eq!(net.app::<Producer>(n[2]).unwrap().hits, 0);
        let miss = net.get(n[0], FetchRequest::plain(name("ndn:/OGB/14/41/x")));
        assert!(matches!(miss, Err(IcnError::NoRoute(_))));
    }

    #[test]
    fn duplicate_announcement_rejected() {
        let mut net = SimNetwork::new(1);
        let (_, n) = star(&mut net, 2, LinkParams::lan(), 0);
        net.attach(n[0], producer("ndn:/OGB/12/41", vec![], 1)).unwrap();
        let err = net.attach(n[1], producer("ndn:/OGB/12/41", vec![], 1)).unwrap_err();
        assert!(matches!(err, IcnError::DuplicateAnnouncement { .. }));
    }

    #[test]
    fn segmented_fetch_and_cache() {
        let mut net = SimNetwork::new(2);
        let (_, n) = star(&mut net, 2, LinkParams::lan(), 100);
        let payload: Vec<u8> = (0..20_000u32).map(|i| (i * 7) as u8).collect();
        net.attach(n[1], producer("ndn:/p", payload.clone(), 50)).unwrap();
        let r = FetchRequest::segmented(name("ndn:/p/obj"), None);
        let got = net.get(n[0], r.clone()).unwrap();
        assert_eq!(got.segments.len(), 3);
        assert_eq!(got.payload, payload);
        let hits = net.app::<Producer>(n[1]).unwrap().hits;
        assert_eq!(hits, 3);
        net.get(n[0], r.clone()).unwrap();
        assert_eq!(net.app::<Producer>(n[1]).unwrap().hits, hits);
        net.advance(100.0);
        net.get(n[0], r).unwrap();
        assert_eq!(net.app::<Producer>(n[1]).unwrap().hits, hits + 3);
    }

    #[test]
    fn pit_aggregation_single_upstream() {
        let mut net = SimNetwork::new(3);
        let (hub, n) = star(&mut net, 2, LinkParams::lan(), 0);
        net.attach(n[1], producer("ndn:/p", vec![9; 100], 1000)).unwrap();
        let reqs = (0..5).map(|_| FetchRequest::plain(name("ndn:/p/x"))).collect();
        let res = net.fetch(n[0], reqs, 5);
        assert!(res.iter().all(|r| r.as_ref().unwrap().payload == vec![9; 100]));
        assert_eq!(net.app::<Producer>(n[1]).unwrap().hits, 1);
        assert_eq!(net.stats(hub).forwarded, 1);
    }

    #[test]
    fn transmission_time() {
        let p = LinkParams { latency_ms: 0.0, bandwidth_bps: 200e6 };
        assert!((p.transmission_ms(55) - 0.0022).abs() < 1e-12);
        assert_eq!(LinkParams::ideal().transmission_ms(1 << 20), 0.0);
    }

    #[test]
    fn ideal_links_cost_only_processing() {
        let mut net = SimNetwork::new(4);
        let (_, n) = star(&mut net, 2, LinkParams::ideal(), 0);
        net.attach(n[1], producer("ndn:/p", vec![1; 10], 0)).unwrap();
        let got = net.get(n[0], FetchRequest::plain(name("ndn:/p/a"))).unwrap();
        assert_eq!(got.completed_ms, 1.0);
    }

    #[test]
    fn busy_periods_serialize() {
        let mut net = SimNetwork::new(5);
        let (_, n) = star(&mut net, 2, LinkParams::ideal(), 0);
        net.attach(n[1], producer("ndn:/p", vec![1; 10], 0)).unwrap();
        let reqs = (0..4).map(|i| FetchRequest::plain(name(&format!("ndn:/p/{i}")))).collect();
        let res = net.fetch(n[0], reqs, 4);
        let times: Vec<f64> = res.iter().map(|r| r.as_ref().unwrap().completed_ms).collect();
        assert_eq!(times, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(net.app_busy_ms(n[1]), 4.0);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = |seed| {
            let mut net = SimNetwork::new(seed);
            let (_, n) = star(&mut net, 3, LinkParams { latency_ms: 0.3, bandwidth_bps: 1e7 }, 10);
            net.attach(n[1], producer("ndn:/a", vec![3; 12_000], 100)).unwrap();
            net.attach(n[2], producer("ndn:/b", vec![4; 500], 100)).unwrap();
            let reqs = ["ndn:/a/1", "ndn:/b/1", "ndn:/a/1", "ndn:/a/2"].iter().map(|s| FetchRequest::segmented(name(s), None)).collect();
            net.fetch(n[0], reqs, 2);
            (net.trace_digest(), net.now())
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn silent_drop_times_out_after_retry() {
        struct Mute;
        impl App for Mute {
            fn on_interest(&mut self, _: f64, _: &Interest) -> Handled {
                Handled::none()
            }
            fn prefixes(&self) -> Vec<Name> {
                vec!["ndn:/m".parse().unwrap()]
            }
            fn as_any(&self) -> &dyn Any {
                self
            }
            fn as_any_mut(&mut self) -> &mut dyn Any {
                self
            }
        }
        let mut net = SimNetwork::new(6);
        let (_, n) = star(&mut net, 2, LinkParams::ideal(), 0);
        net.attach(n[1], Box::new(Mute)).unwrap();
        let r = net.get(n[0], FetchRequest::plain(name("ndn:/m/x")));
        assert!(matches!(r, Err(IcnError::Timeout(_))));
        assert_eq!(net.now(), 2.0 * DEFAULT_LIFETIME_MS as f64);
    }
}
