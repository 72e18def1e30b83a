//! TCP router and application hosts.
//!
//! The router owns one forwarder and treats every accepted connection as a
//! link. Hosts run a forwarder plus one [`App`] behind a single upstream link
//! to the router and accept out-of-band requests on their own address.
//! Frames are those of [`crate::wire`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forwarder::{FwdOut, DEFAULT_LIFETIME_MS};
use super::tables::FibEntry;
use super::{assemble, Address, App, FetchRequest, Fetched, Face, Forwarder, Handled, IcnError, Interest, InterestGuard, Packet, Substrate};
use crate::naming::{segment_name, split_segment, Name};
use crate::wire::{read_frame, write_frame, Frame};

/// Per-segment retransmissions before a fetch fails.
pub const RETRIES: u32 = 3;

fn to_frame(p: Packet) -> Frame {
    match p {
        Packet::Interest(i) => Frame::Interest(i),
        Packet::Content(c) => Frame::Content(c),
        Packet::Nack(n) => Frame::Nack(n),
    }
}

fn to_packet(f: Frame) -> Option<Packet> {
    match f {
        Frame::Interest(i) => Some(Packet::Interest(i)),
        Frame::Content(c) => Some(Packet::Content(c)),
        Frame::Nack(n) => Some(Packet::Nack(n)),
        _ => None,
    }
}

fn resolve(addr: &Address) -> io::Result<std::net::SocketAddr> {
    (addr.host.as_str(), addr.port).to_socket_addrs()?.next().ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, addr.to_string()))
}

fn connect(addr: &Address, timeout: Duration) -> io::Result<TcpStream> {
    let s = TcpStream::connect_timeout(&resolve(addr)?, timeout)?;
    s.set_nodelay(true)?;
    Ok(s)
}

fn listen(addr: &Address) -> io::Result<TcpListener> {
    TcpListener::bind((addr.host.as_str(), addr.port))
}

/// Reads frames from `stream` into `tx` until the peer closes.
fn pump<E: Send + 'static>(mut stream: TcpStream, tx: Sender<E>, wrap: impl Fn(Frame) -> E + Send + 'static, closed: E) {
    thread::spawn(move || {
        while let Ok(Some(f)) = read_frame(&mut stream) {
            if tx.send(wrap(f)).is_err() {
                return;
            }
        }
        let _ = tx.send(closed);
    });
}

/// Accepts connections until `stop` is set; the listener is woken by a
/// self-connection on shutdown.
fn accept_loop(listener: TcpListener, stop: Arc<AtomicBool>, mut on_conn: impl FnMut(TcpStream) + Send + 'static) -> JoinHandle<()> {
    thread::spawn(move || {
        for s in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            if let Ok(s) = s {
                let _ = s.set_nodelay(true);
                on_conn(s);
            }
        }
    })
}

fn wake(addr: &Address) {
    let _ = connect(addr, Duration::from_millis(200));
}

// ---------------------------------------------------------------- router

enum RouterEvent {
    Connected(usize, TcpStream),
    Frame(usize, Frame),
    Closed(usize),
}

pub struct RouterHandle {
    pub address: Address,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
    acceptor: Option<JoinHandle<()>>,
}

impl RouterHandle {
    /// Blocks until the router stops (a link sent `Shutdown`, or [`Self::stop`]).
    pub fn join(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
        self.stop.store(true, Ordering::SeqCst);
        wake(&self.address);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }

    pub fn stop(self) {
        if let Ok(mut s) = connect(&self.address, Duration::from_secs(1)) {
            let _ = write_frame(&mut s, &Frame::Shutdown);
        }
        self.join();
    }
}

pub fn spawn_router(address: &Address, cache_capacity: usize, guard: Option<InterestGuard>) -> io::Result<RouterHandle> {
    let listener = listen(address)?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let mut next = 0usize;
    let acc_tx = tx.clone();
    let acceptor = accept_loop(listener, stop.clone(), move |s| {
        next += 1;
        let id = next;
        if let Ok(w) = s.try_clone() {
            let _ = acc_tx.send(RouterEvent::Connected(id, w));
            pump(s, acc_tx.clone(), move |f| RouterEvent::Frame(id, f), RouterEvent::Closed(id));
        }
    });
    drop(tx);
    let mut fwd = Forwarder::new(cache_capacity, 0x524f_5554);
    fwd.set_guard(guard);
    let stop2 = stop.clone();
    let addr = address.clone();
    let worker = thread::spawn(move || {
        router_loop(fwd, rx);
        stop2.store(true, Ordering::SeqCst);
        wake(&addr);
    });
    Ok(RouterHandle { address: address.clone(), stop, worker: Some(worker), acceptor: Some(acceptor) })
}

fn router_loop(fwd: Forwarder, rx: Receiver<RouterEvent>) {
    let mut links: HashMap<usize, TcpStream> = HashMap::new();
    route(fwd, rx, &mut links);
    // Closing every link lets hosts and clients notice the router is gone.
    for l in links.values() {
        let _ = l.shutdown(Shutdown::Both);
    }
}

fn route(mut fwd: Forwarder, rx: Receiver<RouterEvent>, links: &mut HashMap<usize, TcpStream>) {
    let clock = Instant::now();
    let mut labels: HashMap<usize, String> = HashMap::new();
    let mut owners: BTreeMap<Name, usize> = BTreeMap::new();
    for ev in rx {
        let now = clock.elapsed().as_secs_f64() * 1000.0;
        let outs = match ev {
            RouterEvent::Connected(id, w) => {
                links.insert(id, w);
                continue;
            }
            RouterEvent::Closed(id) => {
                links.remove(&id);
                labels.remove(&id);
                let gone: Vec<Name> = owners.iter().filter(|(_, o)| **o == id).map(|(p, _)| p.clone()).collect();
                for p in gone {
                    owners.remove(&p);
                    fwd.fib.remove(&p);
                }
                fwd.pit.retain(|_, e| e.upstream != Face::Link(id));
                continue;
            }
            RouterEvent::Frame(id, f) => match f {
                Frame::Hello { label } => {
                    labels.insert(id, label);
                    continue;
                }
                Frame::Announce { prefix } => {
                    match owners.get(&prefix) {
                        Some(o) if *o != id => {
                            let owner = labels.get(o).cloned().unwrap_or_default();
                            let msg = format!("prefix {prefix} already announced by {owner}");
                            log::warn!("router: {msg}");
                            if let Some(w) = links.get_mut(&id) {
                                let _ = write_frame(w, &Frame::Error { message: msg });
                            }
                        }
                        _ => {
                            owners.insert(prefix.clone(), id);
                            fwd.fib.insert(FibEntry { prefix, next_hop: Face::Link(id), origin: id });
                        }
                    }
                    continue;
                }
                Frame::Shutdown => return,
                Frame::Stats => {
                    let prefixes: Vec<String> = owners.keys().map(Name::to_string).collect();
                    let stats = serde_json::json!({"prefixes": prefixes, "links": links.len(), "forwarder": fwd.stats});
                    if let Some(w) = links.get_mut(&id) {
                        let _ = write_frame(w, &Frame::StatsReply { stats });
                    }
                    continue;
                }
                f => match to_packet(f) {
                    Some(Packet::Interest(i)) => fwd.on_interest(now, i, Face::Link(id)),
                    Some(Packet::Content(c)) => fwd.on_content(now, c, Face::Link(id)),
                    Some(Packet::Nack(n)) => fwd.on_nack(now, n, Face::Link(id)),
                    None => continue,
                },
            },
        };
        for FwdOut::Send(face, p) in outs {
            if let Face::Link(l) = face {
                if let Some(w) = links.get_mut(&l) {
                    if let Err(e) = write_frame(w, &to_frame(p)) {
                        log::debug!("router: link {l}: {e}");
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- hosts

enum HostEvent {
    Up(Frame),
    UpClosed,
    Direct(Frame, Sender<Frame>),
}

pub struct HostConfig {
    pub label: String,
    pub router: Address,
    /// Address for out-of-band requests.
    pub listen: Option<Address>,
    pub cache_capacity: usize,
    pub guard: Option<InterestGuard>,
}

pub struct HostHandle {
    pub label: String,
    listen: Option<Address>,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<Box<dyn App>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl HostHandle {
    /// Waits for the host to stop and returns its application.
    pub fn join(mut self) -> Option<Box<dyn App>> {
        let app = self.worker.take().and_then(|w| w.join().ok());
        self.stop.store(true, Ordering::SeqCst);
        if let Some(a) = &self.listen {
            wake(a);
        }
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        app
    }

    pub fn stop(self) -> Option<Box<dyn App>> {
        if let Some(a) = &self.listen {
            let _ = call(a, Frame::Shutdown, Duration::from_secs(5));
        }
        self.join()
    }
}

/// Connects `app` to the router and serves it until shut down.
pub fn spawn_host(cfg: HostConfig, app: Box<dyn App>) -> io::Result<HostHandle> {
    let up = connect(&cfg.router, Duration::from_secs(5))?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = match &cfg.listen {
        Some(a) => {
            let listener = listen(a)?;
            let dtx = tx.clone();
            Some(accept_loop(listener, stop.clone(), move |s| serve_direct(s, dtx.clone())))
        }
        None => None,
    };
    pump(up.try_clone()?, tx.clone(), HostEvent::Up, HostEvent::UpClosed);
    drop(tx);
    let mut fwd = Forwarder::new(cfg.cache_capacity, crate::bloom::fnv1a(7, cfg.label.as_bytes()));
    fwd.set_guard(cfg.guard);
    let label = cfg.label.clone();
    let mut host = HostLoop { fwd, app, up, clock: Instant::now(), tokens: HashMap::new(), next_token: 0 };
    let (stop2, listen2) = (stop.clone(), cfg.listen.clone());
    let worker = thread::spawn(move || {
        host.start(&label);
        host.run(rx);
        stop2.store(true, Ordering::SeqCst);
        let _ = host.up.shutdown(Shutdown::Both);
        if let Some(a) = &listen2 {
            wake(a);
        }
        host.app
    });
    Ok(HostHandle { label: cfg.label, listen: cfg.listen, stop, worker: Some(worker), acceptor })
}

fn serve_direct(mut s: TcpStream, tx: Sender<HostEvent>) {
    thread::spawn(move || {
        while let Ok(Some(f)) = read_frame(&mut s) {
            let (rtx, rrx) = mpsc::channel();
            if tx.send(HostEvent::Direct(f, rtx)).is_err() {
                return;
            }
            let reply = rrx.recv().unwrap_or(Frame::Error { message: "host stopped".into() });
            if write_frame(&mut s, &reply).is_err() {
                return;
            }
        }
    });
}

struct HostLoop {
    fwd: Forwarder,
    app: Box<dyn App>,
    up: TcpStream,
    clock: Instant,
    tokens: HashMap<u64, Sender<Frame>>,
    next_token: u64,
}

impl HostLoop {
    fn now(&self) -> f64 {
        self.clock.elapsed().as_secs_f64() * 1000.0
    }

    fn start(&mut self, label: &str) {
        let _ = write_frame(&mut self.up, &Frame::Hello { label: label.to_string() });
        for p in self.app.prefixes() {
            self.fwd.fib.insert(FibEntry { prefix: p.clone(), next_hop: Face::App, origin: 0 });
            let _ = write_frame(&mut self.up, &Frame::Announce { prefix: p });
        }
        // Everything else goes upstream.
        self.fwd.fib.insert(FibEntry { prefix: Name::default(), next_hop: Face::Link(0), origin: 0 });
        let now = self.now();
        let start = self.app.on_start(now);
        for p in start {
            self.feed(Face::App, p);
        }
    }

    fn run(&mut self, rx: Receiver<HostEvent>) {
        for ev in rx {
            match ev {
                HostEvent::Up(f) => {
                    if let Some(p) = to_packet(f) {
                        self.feed(Face::Link(0), p);
                    }
                }
                HostEvent::UpClosed => return,
                HostEvent::Direct(Frame::Shutdown, reply) => {
                    let _ = reply.send(Frame::Ok);
                    return;
                }
                HostEvent::Direct(f, reply) => {
                    self.next_token += 1;
                    let token = self.next_token;
                    self.tokens.insert(token, reply);
                    let now = self.now();
                    let h = self.app.on_direct(now, token, f);
                    self.finish(h, Some(token));
                }
            }
        }
    }

    /// Delivers replies and feeds produced packets back into the forwarder.
    fn finish(&mut self, h: Handled, token: Option<u64>) {
        let mut replies = h.late_replies;
        if let (Some(t), Some(f)) = (token, h.reply) {
            replies.push((t, f));
        }
        for (t, f) in replies {
            if let Some(tx) = self.tokens.remove(&t) {
                let _ = tx.send(f);
            }
        }
        for p in h.out {
            self.feed(Face::App, p);
        }
    }

    fn feed(&mut self, face: Face, p: Packet) {
        let mut queue = VecDeque::from([(face, p)]);
        while let Some((face, p)) = queue.pop_front() {
            let now = self.now();
            let outs = match p {
                Packet::Interest(i) => self.fwd.on_interest(now, i, face),
                Packet::Content(c) => self.fwd.on_content(now, c, face),
                Packet::Nack(n) => self.fwd.on_nack(now, n, face),
            };
            for FwdOut::Send(f, p) in outs {
                match f {
                    Face::Link(_) => {
                        if let Err(e) = write_frame(&mut self.up, &to_frame(p)) {
                            log::debug!("host upstream: {e}");
                        }
                    }
                    Face::App => {
                        let now = self.now();
                        let h = match &p {
                            Packet::Interest(i) => self.app.on_interest(now, i),
                            Packet::Content(c) => self.app.on_content(now, c),
                            Packet::Nack(n) => self.app.on_nack(now, n),
                        };
                        // Busy periods are real time here; only the outputs matter.
                        for (t, f) in h.late_replies {
                            if let Some(tx) = self.tokens.remove(&t) {
                                let _ = tx.send(f);
                            }
                        }
                        queue.extend(h.out.into_iter().map(|p| (Face::App, p)));
                    }
                    Face::Consumer(_) | Face::Internal => {}
                }
            }
        }
    }
}

/// One request/response exchange with the host at `to`.
pub fn call(to: &Address, frame: Frame, timeout: Duration) -> Result<Frame, IcnError> {
    let transport = |e: io::Error| IcnError::Transport(format!("{to}: {e}"));
    let mut s = connect(to, timeout).map_err(transport)?;
    s.set_read_timeout(Some(timeout)).map_err(transport)?;
    write_frame(&mut s, &frame).map_err(transport)?;
    match read_frame(&mut s) {
        Ok(Some(f)) => Ok(f),
        Ok(None) => Err(IcnError::Transport(format!("{to} closed the connection"))),
        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Err(IcnError::Timeout(format!("reply from {to}"))),
        Err(e) => Err(transport(e)),
    }
}

// ---------------------------------------------------------------- client

struct Waiting {
    fetches: Vec<usize>,
    seg: u64,
    attempt: u32,
    deadline: Instant,
}

struct FetchState {
    req: FetchRequest,
    received: BTreeMap<u64, super::ContentObject>,
    final_seg: Option<u64>,
    done: bool,
}

/// A consumer link to the router.
pub struct SocketClient {
    up: TcpStream,
    rx: Receiver<Option<Frame>>,
    clock: Instant,
    rng: ChaCha8Rng,
    /// First per-segment timeout; doubles on every retransmission.
    pub timeout: Duration,
    pub retries: u32,
    pub call_timeout: Duration,
}

impl SocketClient {
    pub fn connect(router: &Address, label: &str) -> Result<Self, IcnError> {
        let transport = |e: io::Error| IcnError::Transport(format!("{router}: {e}"));
        let mut up = connect(router, Duration::from_secs(5)).map_err(transport)?;
        write_frame(&mut up, &Frame::Hello { label: label.to_string() }).map_err(transport)?;
        let (tx, rx) = mpsc::channel();
        pump(up.try_clone().map_err(transport)?, tx, Some, None);
        let seed = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64);
        Ok(SocketClient {
            up,
            rx,
            clock: Instant::now(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ u64::from(std::process::id())),
            timeout: Duration::from_millis(1000),
            retries: RETRIES,
            call_timeout: Duration::from_secs(60),
        })
    }

    fn send(&mut self, fetches: &[FetchState], idx: usize, seg: u64, attempt: u32, inflight: &mut HashMap<Name, Waiting>) -> Result<(), IcnError> {
        let f = &fetches[idx];
        let name = if f.req.segmented { segment_name(&f.req.name, seg) } else { f.req.name.clone() };
        let deadline = Instant::now() + self.timeout * 2u32.pow(attempt);
        if attempt == 0 {
            if let Some(w) = inflight.get_mut(&name) {
                w.fetches.push(idx);
                return Ok(());
            }
        }
        let nonce = self.rng.next_u64();
        let mut interest = match &f.req.signer {
            Some(c) => Interest::signed(name.clone(), nonce, c),
            None => Interest::new(name.clone(), nonce),
        };
        interest.lifetime_ms = Some(DEFAULT_LIFETIME_MS);
        write_frame(&mut self.up, &Frame::Interest(interest)).map_err(|e| IcnError::Transport(e.to_string()))?;
        let w = inflight.entry(name).or_insert(Waiting { fetches: Vec::new(), seg, attempt, deadline });
        if attempt == 0 {
            w.fetches.push(idx);
        }
        w.attempt = attempt;
        w.deadline = deadline;
        Ok(())
    }
}

impl Substrate for SocketClient {
    fn now_ms(&self) -> f64 {
        self.clock.elapsed().as_secs_f64() * 1000.0
    }

    fn charge(&mut self, _ms: f64) {}

    fn fetch(&mut self, requests: Vec<FetchRequest>, window: usize) -> Vec<Result<Fetched, IcnError>> {
        let total = requests.len();
        let mut fetches: Vec<FetchState> = requests.into_iter().map(|req| FetchState { req, received: BTreeMap::new(), final_seg: None, done: false }).collect();
        let mut results: Vec<Option<Result<Fetched, IcnError>>> = (0..total).map(|_| None).collect();
        let mut inflight: HashMap<Name, Waiting> = HashMap::new();
        let (mut next, mut active) = (0, 0);
        let window = window.max(1);

        let fail = |idx: usize, e: IcnError, fetches: &mut Vec<FetchState>, results: &mut Vec<Option<Result<Fetched, IcnError>>>, inflight: &mut HashMap<Name, Waiting>, active: &mut usize| {
            if fetches[idx].done {
                return;
            }
            fetches[idx].done = true;
            results[idx] = Some(Err(e));
            *active -= 1;
            for w in inflight.values_mut() {
                w.fetches.retain(|&i| i != idx);
            }
            inflight.retain(|_, w| !w.fetches.is_empty());
        };

        loop {
            while active < window && next < total {
                active += 1;
                if let Err(e) = self.send(&fetches, next, 0, 0, &mut inflight) {
                    fail(next, e, &mut fetches, &mut results, &mut inflight, &mut active);
                }
                next += 1;
            }
            if active == 0 {
                break;
            }
            let Some(deadline) = inflight.values().map(|w| w.deadline).min() else {
                // Nothing outstanding yet requests are active: fail them.
                for idx in 0..total {
                    if !fetches[idx].done && results[idx].is_none() && idx < next {
                        fail(idx, IcnError::Timeout(fetches[idx].req.name.to_string()), &mut fetches, &mut results, &mut inflight, &mut active);
                    }
                }
                continue;
            };
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(wait) {
                Ok(Some(Frame::Content(co))) => {
                    let Some(w) = inflight.remove(&co.name) else { continue };
                    for idx in w.fetches {
                        let f = &mut fetches[idx];
                        if f.done {
                            continue;
                        }
                        let seg = if f.req.segmented { split_segment(&co.name).map_or(0, |(_, s)| s) } else { 0 };
                        let first = f.received.is_empty();
                        f.received.insert(seg, co.clone());
                        if f.req.segmented && first && seg == 0 {
                            let last = co.final_segment.unwrap_or(0);
                            f.final_seg = Some(last);
                            for s in 1..=last {
                                if let Err(e) = self.send(&fetches, idx, s, 0, &mut inflight) {
                                    fail(idx, e, &mut fetches, &mut results, &mut inflight, &mut active);
                                    break;
                                }
                            }
                        }
                        let f = &mut fetches[idx];
                        if !f.done && f.received.len() as u64 == f.final_seg.unwrap_or(0) + 1 {
                            f.done = true;
                            active -= 1;
                            let now = self.clock.elapsed().as_secs_f64() * 1000.0;
                            results[idx] = Some(assemble(&f.req.name, std::mem::take(&mut f.received), now));
                        }
                    }
                }
                Ok(Some(Frame::Nack(n))) => {
                    let Some(w) = inflight.remove(&n.name) else { continue };
                    for idx in w.fetches {
                        fail(idx, IcnError::NoRoute(n.name.to_string()), &mut fetches, &mut results, &mut inflight, &mut active);
                    }
                }
                Ok(Some(_)) => {}
                Err(RecvTimeoutError::Timeout) => {
                    let now = Instant::now();
                    let expired: Vec<Name> = inflight.iter().filter(|(_, w)| w.deadline <= now).map(|(n, _)| n.clone()).collect();
                    for name in expired {
                        let Some(w) = inflight.get(&name) else { continue };
                        let (attempt, idxs) = (w.attempt, w.fetches.clone());
                        if attempt < self.retries {
                            let seg = w.seg;
                            if let Err(e) = self.send(&fetches, idxs[0], seg, attempt + 1, &mut inflight) {
                                for idx in idxs {
                                    fail(idx, e.clone(), &mut fetches, &mut results, &mut inflight, &mut active);
                                }
                            }
                        } else {
                            inflight.remove(&name);
                            for idx in idxs {
                                fail(idx, IcnError::Timeout(name.to_string()), &mut fetches, &mut results, &mut inflight, &mut active);
                            }
                        }
                    }
                }
                Ok(None) | Err(RecvTimeoutError::Disconnected) => {
                    for r in results.iter_mut().filter(|r| r.is_none()) {
                        *r = Some(Err(IcnError::Transport("router closed the connection".into())));
                    }
                    break;
                }
            }
        }
        results.into_iter().map(|r| r.unwrap_or_else(|| Err(IcnError::Timeout("fetch abandoned".into())))).collect()
    }

    fn call(&mut self, to: &Address, msg: Frame) -> Result<Frame, IcnError> {
        call(to, msg, self.call_timeout)
    }
}
