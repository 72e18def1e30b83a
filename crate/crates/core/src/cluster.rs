//! Cluster configuration and the deployments built from it: in simulation
//! or over local TCP sockets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::bloom::{BloomParams, CbfDigest};
use crate::engine::{prefixes_overlap, Engine, EngineConfig, EngineStats, Store};
use crate::frontend::{FrontEnd, FrontendError, QueryReport, RangeQuery, WriteReport};
use crate::geodata::{GeoFeature, OgbData};
use crate::grid::TileId;
use crate::icn::sim::{LinkParams, NodeId, SimEndpoint, SimNetwork};
use crate::icn::socket::{self, spawn_host, spawn_router, HostConfig, HostHandle, RouterHandle, SocketClient};
use crate::icn::{Address, Handled, IcnError, InterestGuard};
use crate::naming::{tile_prefix, Name};
use crate::perfmodel::ProcessingCosts;
use crate::services::{BfServer, CertRepoApp};
use crate::trust::{engine_identity, tenant_identity, user_identity, CertRepository, Certificate, Credentials, KeyPair, Role, Validator, ValidatorRules};
use crate::wire::Frame;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("invalid cluster config: {0}")]
    Config(String),
    #[error("unknown engine {0}")]
    UnknownEngine(String),
    #[error(transparent)]
    Network(#[from] IcnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trust: {0}")]
    Trust(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sim,
    Socket,
}

fn default_m() -> usize {
    BloomParams::default().m
}
fn default_h() -> u32 {
    BloomParams::default().h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfServerConfig {
    pub address: Address,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_h")]
    pub h: u32,
}

impl BfServerConfig {
    pub fn params(&self) -> BloomParams {
        BloomParams { m: self.m, h: self.h }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    #[serde(rename = "latencyMs")]
    pub latency_ms: f64,
    #[serde(rename = "bandwidthBps")]
    pub bandwidth_bps: f64,
}

fn default_router_cache() -> usize {
    0
}
fn local(port: u16) -> Address {
    Address { host: "127.0.0.1".into(), port }
}
fn default_router() -> Address {
    local(6360)
}
fn default_certs() -> Address {
    local(6361)
}

/// Node labels used by the default star topology.
pub const ROUTER: &str = "router";
pub const CLIENT: &str = "client";
pub const BF_NODE: &str = "bf";
pub const CERT_NODE: &str = "certs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub engines: Vec<EngineConfig>,
    #[serde(rename = "bfServer", default, skip_serializing_if = "Option::is_none")]
    pub bf_server: Option<BfServerConfig>,
    #[serde(rename = "certRepo", default = "default_certs")]
    pub cert_repo: Address,
    #[serde(default = "default_router")]
    pub router: Address,
    #[serde(rename = "routerCacheCapacity", default = "default_router_cache")]
    pub router_cache_capacity: usize,
    /// Explicit links between node labels; empty means a LAN star around the router.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkConfig>,
    #[serde(rename = "trustAnchor", default, skip_serializing_if = "Option::is_none")]
    pub trust_anchor: Option<PathBuf>,
    #[serde(rename = "dataDir", default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Processing delays injected per the timing model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<ProcessingCosts>,
}

impl ClusterConfig {
    fn base(engines: Vec<EngineConfig>) -> Self {
        ClusterConfig {
            mode: Mode::Sim,
            seed: Some(1),
            engines,
            bf_server: Some(BfServerConfig { address: local(6362), m: default_m(), h: default_h() }),
            cert_repo: default_certs(),
            router: default_router(),
            router_cache_capacity: 0,
            links: Vec::new(),
            trust_anchor: None,
            data_dir: None,
            costs: None,
        }
    }

    /// One engine serving the whole world.
    pub fn single_engine() -> Self {
        let world = (-180..180).map(|lng| Name::new(["OGB".to_string(), lng.to_string()]).unwrap()).collect();
        Self::base(vec![EngineConfig::new("db0", world, local(6400))])
    }

    /// Four engines, one per longitude quadrant.
    pub fn four_zones() -> Self {
        let engines = (0..4)
            .map(|z| {
                let lo = -180 + 90 * z;
                let served = (lo..lo + 90).map(|lng| Name::new(["OGB".to_string(), lng.to_string()]).unwrap()).collect();
                EngineConfig::new(&format!("zone{z}"), served, local(6400 + z as u16))
            })
            .collect();
        Self::base(engines)
    }

    /// Engines serving given level-0 tiles, one each.
    pub fn per_tile(tiles: &[TileId]) -> Self {
        let engines = tiles.iter().enumerate().map(|(i, t)| EngineConfig::new(&format!("db{i}"), vec![tile_prefix(t)], local(6400 + i as u16))).collect();
        Self::base(engines)
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: String| Err(ClusterError::Config(m));
        if self.engines.is_empty() {
            return bad("at least one engine is required".into());
        }
        if self.mode == Mode::Sim && self.seed.is_none() {
            return bad("sim mode requires a seed".into());
        }
        let mut ids = BTreeSet::new();
        let mut addrs = BTreeSet::from([self.cert_repo.clone(), self.router.clone()]);
        if addrs.len() != 2 {
            return bad("router and certificate repository share an address".into());
        }
        if let Some(bf) = &self.bf_server {
            if !addrs.insert(bf.address.clone()) {
                return bad(format!("address {} used twice", bf.address));
            }
            if bf.m == 0 || bf.h == 0 {
                return bad("bloom parameters must be positive".into());
            }
        }
        for (i, e) in self.engines.iter().enumerate() {
            if !ids.insert(e.id.clone()) {
                return bad(format!("engine id {} used twice", e.id));
            }
            if !addrs.insert(e.address.clone()) {
                return bad(format!("address {} used twice", e.address));
            }
            if e.served_prefixes.is_empty() {
                return bad(format!("engine {} serves nothing", e.id));
            }
            for other in &self.engines[i + 1..] {
                if let Some((p, q)) = prefixes_overlap(&e.served_prefixes, &other.served_prefixes) {
                    return bad(format!("served prefixes overlap: {p} ({}) and {q} ({})", e.id, other.id));
                }
            }
        }
        for l in &self.links {
            if !(l.latency_ms >= 0.0 && l.bandwidth_bps > 0.0) {
                return bad(format!("link {}-{} needs latency >= 0 and bandwidth > 0", l.a, l.b));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ClusterConfig = serde_json::from_str(&text).map_err(|e| ClusterError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn engine(&self, id: &str) -> Option<&EngineConfig> {
        self.engines.iter().find(|e| e.id == id)
    }
}

/// Administrator key plus the principals issued from it.
pub struct TrustRoot {
    pub admin: Credentials,
    rng: ChaCha20Rng,
    pub repo: CertRepository,
    tenants: BTreeMap<String, Credentials>,
    users: BTreeMap<(String, String), Credentials>,
}

#[derive(Serialize, Deserialize)]
struct StoredKey {
    cert: Certificate,
    #[serde(rename = "keySeedHex")]
    seed: String,
}

impl StoredKey {
    fn of(c: &Credentials) -> Self {
        StoredKey { cert: c.cert.clone(), seed: c.key.seed().iter().map(|b| format!("{b:02x}")).collect() }
    }

    fn credentials(&self) -> Result<Credentials, ClusterError> {
        let key = KeyPair::from_seed(parse_seed(&self.seed)?);
        if key.public_key().as_slice() != self.cert.public_key.as_slice() {
            return Err(ClusterError::Trust(format!("key of {} does not match its certificate", self.cert.identity)));
        }
        Ok(Credentials { cert: self.cert.clone(), key })
    }
}

fn parse_seed(hex: &str) -> Result<[u8; 32], ClusterError> {
    let bad = || ClusterError::Trust("malformed key seed".into());
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// On-disk form of a [`TrustRoot`]. Holds private keys.
#[derive(Serialize, Deserialize)]
struct Keystore {
    admin: StoredKey,
    #[serde(rename = "rngSeedHex")]
    rng_seed: String,
    #[serde(rename = "rngWordPos")]
    rng_word_pos: String,
    tenants: Vec<StoredKey>,
    users: Vec<StoredKey>,
}

impl TrustRoot {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0000_6762_6164_726b);
        let admin = Credentials::admin(KeyPair::generate(&mut rng));
        Self::new(admin, rng)
    }

    pub fn new(admin: Credentials, rng: ChaCha20Rng) -> Self {
        let mut repo = CertRepository::new();
        repo.publish(admin.cert.clone());
        TrustRoot { admin, rng, repo, tenants: BTreeMap::new(), users: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        let text = std::fs::read_to_string(path)?;
        let ks: Keystore = serde_json::from_str(&text).map_err(|e| ClusterError::Trust(format!("{}: {e}", path.display())))?;
        let mut rng = ChaCha20Rng::from_seed(parse_seed(&ks.rng_seed)?);
        rng.set_word_pos(ks.rng_word_pos.parse().map_err(|_| ClusterError::Trust("malformed rng position".into()))?);
        let mut root = Self::new(ks.admin.credentials()?, rng);
        for t in &ks.tenants {
            let c = t.credentials()?;
            let Some(Role::Tenant { tid }) = c.role() else { return Err(ClusterError::Trust(format!("{} is not a tenant", c.identity()))) };
            root.repo.publish(c.cert.clone());
            root.tenants.insert(tid, c);
        }
        for u in &ks.users {
            let c = u.credentials()?;
            let Some(Role::User { tid, uid }) = c.role() else { return Err(ClusterError::Trust(format!("{} is not a user", c.identity()))) };
            root.repo.publish(c.cert.clone());
            root.users.insert((tid, uid), c);
        }
        Ok(root)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClusterError> {
        let ks = Keystore {
            admin: StoredKey::of(&self.admin),
            rng_seed: self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            tenants: self.tenants.values().map(StoredKey::of).collect(),
            users: self.users.values().map(StoredKey::of).collect(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&ks).expect("keystore serializes"))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn tenants(&self) -> impl Iterator<Item = &Credentials> {
        self.tenants.values()
    }

    pub fn user(&self, tid: &str, uid: &str) -> Option<&Credentials> {
        self.users.get(&(tid.to_string(), uid.to_string()))
    }

    pub fn users(&self) -> impl Iterator<Item = &Credentials> {
        self.users.values()
    }

    pub fn validator(&self) -> Arc<Validator> {
        Arc::new(Validator::new(self.admin.cert.clone(), ValidatorRules::default()))
    }

    pub fn issue_engine(&mut self, id: &str) -> Result<Credentials, ClusterError> {
        let c = self.admin.issue_new(&engine_identity(id), &mut self.rng).map_err(|e| ClusterError::Trust(e.to_string()))?;
        self.repo.publish(c.cert.clone());
        Ok(c)
    }

    pub fn tenant(&mut self, tid: &str) -> Result<Credentials, ClusterError> {
        if let Some(t) = self.tenants.get(tid) {
            return Ok(t.clone());
        }
        let t = self.admin.issue_new(&tenant_identity(tid), &mut self.rng).map_err(|e| ClusterError::Trust(e.to_string()))?;
        self.repo.publish(t.cert.clone());
        self.tenants.insert(tid.into(), t.clone());
        Ok(t)
    }

    pub fn issue_user(&mut self, tid: &str, uid: &str) -> Result<Credentials, ClusterError> {
        let tenant = self.tenant(tid)?;
        let u = tenant.issue_new(&user_identity(tid, uid), &mut self.rng).map_err(|e| ClusterError::Trust(e.to_string()))?;
        self.repo.publish(u.cert.clone());
        self.users.insert((tid.to_string(), uid.to_string()), u.clone());
        Ok(u)
    }
}

struct EngineSlot {
    node: NodeId,
    creds: Arc<Credentials>,
    validator: Arc<Validator>,
    /// Store of a stopped engine.
    parked: Option<Store>,
}

/// A full deployment inside one discrete-event network.
pub struct SimCluster {
    pub net: SimNetwork,
    pub config: ClusterConfig,
    pub trust: TrustRoot,
    pub router: NodeId,
    pub client: NodeId,
    pub bf: Option<NodeId>,
    pub certs: NodeId,
    engines: BTreeMap<String, EngineSlot>,
}

impl SimCluster {
    pub fn new(config: ClusterConfig) -> Result<Self, ClusterError> {
        let seed = config.seed.unwrap_or(1);
        Self::with_trust(config, TrustRoot::from_seed(seed))
    }

    pub fn with_trust(config: ClusterConfig, mut trust: TrustRoot) -> Result<Self, ClusterError> {
        config.validate()?;
        let seed = config.seed.unwrap_or(1);
        let mut net = SimNetwork::new(seed);
        let router = net.add_node(ROUTER, config.router_cache_capacity);
        let client = net.add_node(CLIENT, 0);
        let certs = net.add_node(CERT_NODE, 0);
        let bf = config.bf_server.as_ref().map(|_| net.add_node(BF_NODE, 0));
        let mut engine_nodes = Vec::new();
        for e in &config.engines {
            engine_nodes.push(net.add_node(&e.id, e.cache_capacity));
        }

        if config.links.is_empty() {
            for n in 0..net.node_count() {
                if n != router {
                    net.add_link(router, n, LinkParams::lan());
                }
            }
        } else {
            for l in &config.links {
                let find = |label: &str| net.find_node(label).ok_or_else(|| ClusterError::Config(format!("link names unknown node {label}")));
                let (a, b) = (find(&l.a)?, find(&l.b)?);
                net.add_link(a, b, LinkParams { latency_ms: l.latency_ms, bandwidth_bps: l.bandwidth_bps });
            }
        }

        for n in 0..net.node_count() {
            net.set_guard(n, Some(InterestGuard::new(trust.validator())));
        }

        let mut engines = BTreeMap::new();
        for (e, node) in config.engines.iter().zip(engine_nodes) {
            let creds = Arc::new(trust.issue_engine(&e.id)?);
            engines.insert(e.id.clone(), EngineSlot { node, creds, validator: trust.validator(), parked: None });
            net.register_address(e.address.clone(), node);
        }
        net.register_address(config.cert_repo.clone(), certs);
        net.register_address(config.router.clone(), router);
        net.attach(certs, Box::new(CertRepoApp::new(trust.repo.clone())))?;
        if let (Some(b), Some(bc)) = (bf, &config.bf_server) {
            net.register_address(bc.address.clone(), b);
            let ids = config.engines.iter().map(|e| e.id.clone()).collect();
            net.attach(b, Box::new(BfServer::new(bc.params(), ids, Some(trust.validator()))))?;
        }
        let mut cluster = SimCluster { net, config, trust, router, client, bf, certs, engines };
        let ids: Vec<String> = cluster.engines.keys().cloned().collect();
        for id in &ids {
            cluster.start_engine(id)?;
        }
        cluster.net.run_until_idle();
        Ok(cluster)
    }

    fn bloom(&self) -> BloomParams {
        self.config.bf_server.as_ref().map_or_else(BloomParams::default, |b| b.params())
    }

    fn slot(&self, id: &str) -> Result<&EngineSlot, ClusterError> {
        self.engines.get(id).ok_or_else(|| ClusterError::UnknownEngine(id.into()))
    }

    fn start_engine(&mut self, id: &str) -> Result<(), ClusterError> {
        let cfg = self.config.engine(id).cloned().ok_or_else(|| ClusterError::UnknownEngine(id.into()))?;
        let bloom = self.bloom();
        let costs = self.config.costs;
        let dir = self.config.data_dir.as_ref().map(|d| d.join(id));
        let slot = self.engines.get_mut(id).ok_or_else(|| ClusterError::UnknownEngine(id.into()))?;
        let store = match (slot.parked.take(), &dir) {
            (_, Some(d)) => Store::open(d)?,
            (Some(s), None) => s,
            (None, None) => Store::in_memory(),
        };
        let engine = Engine::with_store(cfg, slot.creds.clone(), slot.validator.clone(), bloom, costs, store);
        let node = slot.node;
        self.net.attach(node, Box::new(engine))?;
        self.resync_bf(id)?;
        Ok(())
    }

    /// Stops an engine (snapshotting its store) and starts it again.
    pub fn restart_engine(&mut self, id: &str) -> Result<(), ClusterError> {
        self.stop_engine(id)?;
        self.start_engine(id)?;
        self.net.run_until_idle();
        Ok(())
    }

    pub fn stop_engine(&mut self, id: &str) -> Result<(), ClusterError> {
        let node = self.slot(id)?.node;
        let app: Box<dyn std::any::Any> = self.net.detach(node).ok_or_else(|| ClusterError::UnknownEngine(id.into()))?;
        let mut engine = app.downcast::<Engine>().map_err(|_| ClusterError::UnknownEngine(id.into()))?;
        engine.shutdown()?;
        let store = engine.into_store();
        let dir_backed = self.config.data_dir.is_some();
        self.engines.get_mut(id).unwrap().parked = if dir_backed { None } else { Some(store) };
        Ok(())
    }

    /// Pushes the engine's full filter state to the BF server and
    /// resubscribes it from the engine's next batch.
    pub fn resync_bf(&mut self, id: &str) -> Result<(), ClusterError> {
        let Some(bf) = self.bf else { return Ok(()) };
        let node = self.slot(id)?.node;
        let digest: CbfDigest = match self.net.call(bf, node, Frame::DigestRequest)? {
            Frame::Digest { digest } => digest,
            other => return Err(ClusterError::Network(IcnError::Malformed(format!("digest reply {other:?}")))),
        };
        self.net.with_app::<BfServer, _>(bf, |s, _| ((), s.resync(&digest)));
        Ok(())
    }

    pub fn engine_ids(&self) -> Vec<String> {
        self.engines.keys().cloned().collect()
    }

    pub fn engine_node(&self, id: &str) -> Option<NodeId> {
        self.engines.get(id).map(|s| s.node)
    }

    pub fn engine(&self, id: &str) -> Option<&Engine> {
        self.net.app::<Engine>(self.engines.get(id)?.node)
    }

    pub fn engine_stats(&self) -> BTreeMap<String, EngineStats> {
        self.engines.keys().filter_map(|id| Some((id.clone(), self.engine(id)?.stats.clone()))).collect()
    }

    pub fn reset_engine_stats(&mut self) {
        for s in self.engines.values() {
            if let Some(e) = self.net.app_mut::<Engine>(s.node) {
                e.stats = EngineStats::default();
            }
        }
        self.net.reset_stats();
    }

    pub fn bf_server(&self) -> Option<&BfServer> {
        self.net.app::<BfServer>(self.bf?)
    }

    /// Engine whose configuration serves `tile`.
    pub fn responsible(&self, tile: &TileId) -> Option<String> {
        self.config.engines.iter().find(|e| e.serves(tile)).map(|e| e.id.clone())
    }

    /// Issues user credentials and makes them available in the certificate repository.
    pub fn issue_user(&mut self, tid: &str, uid: &str) -> Result<Arc<Credentials>, ClusterError> {
        let u = self.trust.issue_user(tid, uid)?;
        let tenant = self.trust.tenant(tid)?;
        if let Some(repo) = self.net.app_mut::<CertRepoApp>(self.certs) {
            repo.repo.publish(tenant.cert);
            repo.repo.publish(u.cert.clone());
        }
        Ok(Arc::new(u))
    }

    pub fn frontend(&self, creds: Arc<Credentials>) -> FrontEnd {
        let bf = self.config.bf_server.as_ref().map(|b| b.address.clone());
        FrontEnd::new(creds, self.trust.validator(), bf).with_costs(self.config.costs)
    }

    pub fn endpoint(&mut self) -> SimEndpoint<'_> {
        self.net.endpoint(self.client)
    }

    pub fn query(&mut self, fe: &mut FrontEnd, q: &RangeQuery) -> Result<QueryReport, FrontendError> {
        let r = fe.range_query(&mut self.net.endpoint(self.client), q);
        self.net.run_until_idle();
        r
    }

    pub fn insert(&mut self, fe: &mut FrontEnd, features: &[GeoFeature]) -> Result<WriteReport, FrontendError> {
        let r = fe.insert_batch(&mut self.net.endpoint(self.client), features);
        self.net.run_until_idle();
        r
    }

    pub fn remove(&mut self, fe: &mut FrontEnd, f: &GeoFeature) -> Result<WriteReport, FrontendError> {
        let r = fe.remove(&mut self.net.endpoint(self.client), f);
        self.net.run_until_idle();
        r
    }

    /// Loads signed items straight into the responsible engines.
    pub fn preload(&mut self, items: Vec<OgbData>) -> Result<usize, ClusterError> {
        let mut by_engine: BTreeMap<String, Vec<OgbData>> = BTreeMap::new();
        for d in items {
            let id = self.responsible(&d.name.tile).ok_or_else(|| ClusterError::Config(format!("no engine serves {}", d.name.to_name())))?;
            by_engine.entry(id).or_default().push(d);
        }
        let mut total = 0;
        for (id, items) in by_engine {
            let node = self.slot(&id)?.node;
            let added = self.net.with_app::<Engine, _>(node, |e, _| match e.preload(items) {
                Ok(n) => (Ok(n), Handled::packets(e.flush_publications())),
                Err(err) => (Err(err), Handled::none()),
            });
            total += added.ok_or_else(|| ClusterError::UnknownEngine(id.clone()))??;
        }
        self.net.run_until_idle();
        Ok(total)
    }

    /// Empties every content store in the network.
    pub fn flush_caches(&mut self) {
        self.net.flush_caches();
    }
}

/// The same deployment as [`SimCluster`], with every component on its own
/// TCP address. Components run as threads of the calling process.
pub struct SocketCluster {
    pub config: ClusterConfig,
    router: Option<RouterHandle>,
    hosts: Vec<HostHandle>,
}

fn reply_error(what: &str, f: Frame) -> ClusterError {
    ClusterError::Network(IcnError::Malformed(format!("{what}: unexpected reply {f:?}")))
}

impl SocketCluster {
    pub fn start(config: ClusterConfig, trust: &mut TrustRoot) -> Result<Self, ClusterError> {
        config.validate()?;
        let guard = |t: &TrustRoot| Some(InterestGuard::new(t.validator()));
        let router = spawn_router(&config.router, config.router_cache_capacity, guard(trust))?;
        let mut cluster = SocketCluster { config: config.clone(), router: Some(router), hosts: Vec::new() };

        let mut engine_creds = Vec::new();
        for e in &config.engines {
            engine_creds.push(Arc::new(trust.issue_engine(&e.id)?));
        }
        let host = |label: &str, listen: &Address, cache: usize, t: &TrustRoot| HostConfig {
            label: label.to_string(),
            router: config.router.clone(),
            listen: Some(listen.clone()),
            cache_capacity: cache,
            guard: guard(t),
        };
        cluster.hosts.push(spawn_host(host(CERT_NODE, &config.cert_repo, 0, trust), Box::new(CertRepoApp::new(trust.repo.clone())))?);
        if let Some(bc) = &config.bf_server {
            let ids = config.engines.iter().map(|e| e.id.clone()).collect();
            let app = BfServer::new(bc.params(), ids, Some(trust.validator()));
            cluster.hosts.push(spawn_host(host(BF_NODE, &bc.address, 0, trust), Box::new(app))?);
        }
        let bloom = config.bf_server.as_ref().map_or_else(BloomParams::default, |b| b.params());
        for (e, creds) in config.engines.iter().zip(engine_creds) {
            let store = match &config.data_dir {
                Some(d) => Store::open(&d.join(&e.id))?,
                None => Store::in_memory(),
            };
            let engine = Engine::with_store(e.clone(), creds, trust.validator(), bloom, None, store);
            cluster.hosts.push(spawn_host(host(&e.id, &e.address, e.cache_capacity, trust), Box::new(engine))?);
        }
        cluster.await_routes()?;
        if let Some(bc) = &config.bf_server {
            for e in &config.engines {
                let digest = match socket::call(&e.address, Frame::DigestRequest, Duration::from_secs(30))? {
                    f @ Frame::Digest { .. } => f,
                    other => return Err(reply_error("digest", other)),
                };
                match socket::call(&bc.address, digest, Duration::from_secs(30))? {
                    Frame::Ok => {}
                    other => return Err(reply_error("bf resync", other)),
                }
            }
        }
        Ok(cluster)
    }

    /// Waits until the router has a route for every announced prefix.
    fn await_routes(&self) -> Result<(), ClusterError> {
        let expected = self.config.engines.iter().map(|e| e.served_prefixes.len()).sum::<usize>() + 1;
        let deadline = std::time::Instant::now() + Duration::from_secs(10);
        loop {
            let n = match socket::call(&self.config.router, Frame::Stats, Duration::from_secs(5))? {
                Frame::StatsReply { stats } => stats["prefixes"].as_array().map_or(0, Vec::len),
                other => return Err(reply_error("router stats", other)),
            };
            if n >= expected {
                return Ok(());
            }
            if std::time::Instant::now() > deadline {
                return Err(ClusterError::Config(format!("only {n} of {expected} prefixes announced")));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// A consumer connection with `creds` published to the repository.
    pub fn client(&self, creds: &Credentials, trust: &TrustRoot) -> Result<SocketClient, ClusterError> {
        socket_client(&self.config, creds, trust)
    }

    pub fn frontend(&self, creds: Arc<Credentials>, trust: &TrustRoot) -> FrontEnd {
        let bf = self.config.bf_server.as_ref().map(|b| b.address.clone());
        FrontEnd::new(creds, trust.validator(), bf)
    }

    /// Blocks until the router is shut down, then stops every component.
    pub fn wait(mut self) -> Result<(), ClusterError> {
        if let Some(r) = self.router.take() {
            r.join();
        }
        self.finish()
    }

    pub fn stop(mut self) -> Result<(), ClusterError> {
        if let Some(r) = self.router.take() {
            r.stop();
        }
        self.finish()
    }

    fn finish(&mut self) -> Result<(), ClusterError> {
        let mut result = Ok(());
        for h in self.hosts.drain(..) {
            if let Some(app) = h.stop() {
                if let Ok(mut e) = (app as Box<dyn std::any::Any>).downcast::<Engine>() {
                    if let Err(err) = e.shutdown() {
                        result = Err(err.into());
                    }
                }
            }
        }
        result
    }
}

impl Drop for SocketCluster {
    fn drop(&mut self) {
        if let Some(r) = self.router.take() {
            r.stop();
        }
        let _ = self.finish();
    }
}

/// Connects to a running socket deployment as `creds`, publishing the
/// certificates of `creds`' chain first.
pub fn socket_client(config: &ClusterConfig, creds: &Credentials, trust: &TrustRoot) -> Result<SocketClient, ClusterError> {
    if let Some(Role::User { tid, .. }) = creds.role() {
        let tenant = trust.tenants.get(&tid).ok_or_else(|| ClusterError::Trust(format!("tenant {tid} not in keystore")))?;
        for cert in [tenant.cert.clone(), creds.cert.clone()] {
            match socket::call(&config.cert_repo, Frame::PublishCert { cert }, Duration::from_secs(10))? {
                Frame::Ok => {}
                Frame::Error { message } => return Err(ClusterError::Trust(message)),
                other => return Err(reply_error("publish", other)),
            }
        }
    }
    Ok(SocketClient::connect(&config.router, CLIENT)?)
}

/// Asks a running socket deployment to shut down.
pub fn stop_socket_cluster(config: &ClusterConfig) -> Result<(), ClusterError> {
    let mut s = std::net::TcpStream::connect((config.router.host.as_str(), config.router.port))?;
    crate::wire::write_frame(&mut s, &Frame::Shutdown)?;
    Ok(())
}
