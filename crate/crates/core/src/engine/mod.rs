//! Database engine: stores OGB-Data, answers tile queries and IP-RES
//! lookups for its served prefixes, and maintains its counting filter.

pub mod store;

use std::any::Any;
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bloom::{engine_topic, parse_topic_name, topic_name, BfPublication, BloomParams, CbfDigest, CountingBloomFilter, Direction, PublicationBatch};
use crate::geodata::{OgbData, OgbTile};
use crate::grid::TileId;
use crate::icn::packet::{segment, ContentObject, Interest};
use crate::icn::{Address, App, Handled, Nack, NackReason, Packet};
use crate::naming::{parse, routable, split_segment, tile_prefix, IpResName, Name, ParsedName, TileName};
use crate::perfmodel::ProcessingCosts;
use crate::trust::{cert_repo_name, identity_from_repo_name, Certificate, CheckOutcome, Credentials, PacketKind, Rejection, TrustEnvelope, Validator};
use crate::wire::{DeleteItem, Frame, ItemStatus, DELETE_TAG};

pub use store::{Store, StoreMeta};

fn default_cache() -> usize {
    10_000
}
fn default_freshness() -> u64 {
    60_000
}
fn default_ipres_freshness() -> u64 {
    5_000
}
fn default_segment_size() -> usize {
    8000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub id: String,
    /// Tile-prefixes (or longitude bands such as `ndn:/OGB/12`) served.
    #[serde(rename = "servedPrefixes")]
    pub served_prefixes: Vec<Name>,
    pub address: Address,
    #[serde(rename = "cacheCapacity", default = "default_cache")]
    pub cache_capacity: usize,
    #[serde(rename = "defaultFreshnessMs", default = "default_freshness")]
    pub default_freshness_ms: u64,
    #[serde(rename = "tenantFreshnessMs", default)]
    pub tenant_freshness_ms: BTreeMap<String, u64>,
    #[serde(rename = "ipResFreshnessMs", default = "default_ipres_freshness")]
    pub ipres_freshness_ms: u64,
    #[serde(rename = "segmentSize", default = "default_segment_size")]
    pub segment_size: usize,
}

impl EngineConfig {
    pub fn new(id: &str, served: Vec<Name>, address: Address) -> Self {
        EngineConfig {
            id: id.into(),
            served_prefixes: served,
            address,
            cache_capacity: default_cache(),
            default_freshness_ms: default_freshness(),
            tenant_freshness_ms: BTreeMap::new(),
            ipres_freshness_ms: default_ipres_freshness(),
            segment_size: default_segment_size(),
        }
    }

    pub fn routing_prefixes(&self) -> Vec<Name> {
        self.served_prefixes.iter().map(routable).collect()
    }

    pub fn serves(&self, tile: &TileId) -> bool {
        let tp = tile_prefix(tile);
        self.served_prefixes.iter().any(|p| routable(p).is_prefix_of(&tp))
    }

    pub fn freshness_for(&self, tid: &str) -> u64 {
        self.tenant_freshness_ms.get(tid).copied().unwrap_or(self.default_freshness_ms)
    }
}

/// Whether two served-prefix lists overlap (one prefix contains the other).
pub fn prefixes_overlap(a: &[Name], b: &[Name]) -> Option<(Name, Name)> {
    for p in a {
        for q in b {
            let (rp, rq) = (routable(p), routable(q));
            if rp.is_prefix_of(&rq) || rq.is_prefix_of(&rp) {
                return Some((p.clone(), q.clone()));
            }
        }
    }
    None
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    #[serde(rename = "interestsReceived")]
    pub interests_received: u64,
    #[serde(rename = "tileQueriesProcessed")]
    pub tile_queries_processed: u64,
    #[serde(rename = "segmentsFromBuffer")]
    pub segments_from_buffer: u64,
    #[serde(rename = "ipResAnswered")]
    pub ipres_answered: u64,
    pub inserted: u64,
    pub deleted: u64,
    #[serde(rename = "itemsRejected")]
    pub items_rejected: u64,
    pub publications: u64,
    #[serde(rename = "dataGets")]
    pub data_gets: u64,
}

const RESPONSE_BUFFER: usize = 2048;
const OUTBOX: usize = 64;

pub struct Engine {
    cfg: EngineConfig,
    creds: Arc<Credentials>,
    validator: Arc<Validator>,
    store: Store,
    cbf: CountingBloomFilter,
    costs: Option<ProcessingCosts>,
    pending_pubs: Vec<BfPublication>,
    held: BTreeMap<u64, Interest>,
    outbox: VecDeque<(u64, ContentObject)>,
    responses: HashMap<Name, Vec<ContentObject>>,
    response_order: VecDeque<Name>,
    waiting_ops: VecDeque<(u64, Frame)>,
    requested_certs: HashSet<Name>,
    unavailable_certs: HashSet<Name>,
    nonce: u64,
    pub stats: EngineStats,
}

impl Engine {
    /// Builds an engine over `store`, rebuilding the counting filter from it.
    pub fn with_store(
        cfg: EngineConfig,
        creds: Arc<Credentials>,
        validator: Arc<Validator>,
        bloom: BloomParams,
        costs: Option<ProcessingCosts>,
        store: Store,
    ) -> Self {
        let mut cbf = CountingBloomFilter::new(bloom);
        for d in store.iter() {
            cbf.insert_key(&tile_prefix(&d.name.tile).to_string());
        }
        Engine {
            cfg,
            creds,
            validator,
            store,
            cbf,
            costs,
            pending_pubs: Vec::new(),
            held: BTreeMap::new(),
            outbox: VecDeque::new(),
            responses: HashMap::new(),
            response_order: VecDeque::new(),
            waiting_ops: VecDeque::new(),
            requested_certs: HashSet::new(),
            unavailable_certs: HashSet::new(),
            nonce: 0,
            stats: EngineStats::default(),
        }
    }

    pub fn open(
        cfg: EngineConfig,
        creds: Arc<Credentials>,
        validator: Arc<Validator>,
        bloom: BloomParams,
        costs: Option<ProcessingCosts>,
        data_dir: Option<PathBuf>,
    ) -> io::Result<Self> {
        let store = match &data_dir {
            Some(d) => Store::open(d)?,
            None => Store::in_memory(),
        };
        Ok(Self::with_store(cfg, creds, validator, bloom, costs, store))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn id(&self) -> &str {
        &self.cfg.id
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Gives up the engine, keeping its data for a later restart.
    pub fn into_store(mut self) -> Store {
        let _ = self.store.commit();
        self.store
    }

    /// Loads pre-signed items directly, bypassing validation and the network.
    pub fn preload(&mut self, items: Vec<OgbData>) -> io::Result<usize> {
        let mut transitions = Vec::new();
        let mut added = 0;
        for d in items {
            let key = tile_prefix(&d.name.tile).to_string();
            if !self.store.put(d)? {
                added += 1;
                transitions.extend(self.cbf.insert_key(&key));
            }
        }
        self.publish(transitions);
        self.store.commit()?;
        Ok(added)
    }

    pub fn cbf(&self) -> &CountingBloomFilter {
        &self.cbf
    }

    pub fn validator(&self) -> &Arc<Validator> {
        &self.validator
    }

    pub fn set_costs(&mut self, costs: Option<ProcessingCosts>) {
        self.costs = costs;
    }

    pub fn digest(&self) -> CbfDigest {
        let meta = self.store.meta();
        CbfDigest { engine_id: self.cfg.id.clone(), seq: meta.pub_seq, buckets: self.cbf.nonzero(), next_batch: meta.batch }
    }

    /// Persists a snapshot; called on orderly shutdown.
    pub fn shutdown(&mut self) -> io::Result<()> {
        self.store.snapshot()
    }

    fn next_nonce(&mut self) -> u64 {
        self.nonce += 1;
        crate::bloom::fnv1a(self.nonce, self.cfg.id.as_bytes())
    }

    pub(crate) fn nack(i: &Interest) -> Handled {
        Handled::packets(vec![Packet::Nack(Nack { name: i.name.clone(), nonce: i.nonce, reason: NackReason::NoRoute })])
    }

    fn remember(&mut self, base: Name, segs: Vec<ContentObject>) {
        if self.responses.insert(base.clone(), segs).is_none() {
            self.response_order.push_back(base);
        }
        while self.response_order.len() > RESPONSE_BUFFER {
            if let Some(old) = self.response_order.pop_front() {
                self.responses.remove(&old);
            }
        }
    }

    fn tile_query(&mut self, interest: &Interest, base: Name, tn: TileName, seg: u64) -> Handled {
        if !self.cfg.serves(&tn.tile) {
            return Self::nack(interest);
        }
        if seg > 0 {
            if let Some(s) = self.responses.get(&base).and_then(|segs| segs.get(seg as usize)) {
                self.stats.segments_from_buffer += 1;
                return Handled::packets(vec![Packet::Content(s.clone())]);
            }
        }
        self.stats.tile_queries_processed += 1;
        let items: Vec<OgbData> = self.store.tile_query(&tn).into_iter().cloned().collect();
        let ni = items.len();
        let freshness = self.cfg.freshness_for(&tn.tid);
        let tile = OgbTile { name: tn, items, freshness_ms: freshness };
        let segs = segment(&base, &tile.encode(), self.cfg.segment_size, freshness, Some(&self.creds));
        let busy_ms = self.costs.map_or(0.0, |c| c.engine_ms(ni));
        let out = match segs.get(seg as usize) {
            Some(s) => vec![Packet::Content(s.clone())],
            None => return Self::nack(interest),
        };
        self.remember(base, segs);
        Handled { busy_ms, out, ..Handled::default() }
    }

    fn ipres(&mut self, interest: &Interest, r: IpResName) -> Handled {
        if !self.cfg.serves(&r.tile) {
            return Self::nack(interest);
        }
        self.stats.ipres_answered += 1;
        let payload = serde_json::to_vec(&self.cfg.address).expect("address serializes");
        let co = ContentObject::new(interest.name.clone(), payload, self.cfg.ipres_freshness_ms).signed_by(&self.creds);
        Handled::packets(vec![Packet::Content(co)])
    }

    fn subscription(&mut self, interest: &Interest, batch: u64) -> Handled {
        if let Some((_, co)) = self.outbox.iter().find(|(b, _)| *b == batch) {
            return Handled::packets(vec![Packet::Content(co.clone())]);
        }
        let next = self.store.meta().batch;
        if batch < next {
            log::warn!("engine {}: subscription for expired batch {batch}", self.cfg.id);
            return Handled::none();
        }
        self.held.insert(batch, interest.clone());
        Handled::packets(self.flush_publications())
    }

    /// Answers the held subscription with everything pending, if possible.
    pub fn flush_publications(&mut self) -> Vec<Packet> {
        if self.pending_pubs.is_empty() {
            return Vec::new();
        }
        let mut meta = self.store.meta();
        let Some(interest) = self.held.remove(&meta.batch) else { return Vec::new() };
        let batch = PublicationBatch { publications: std::mem::take(&mut self.pending_pubs) };
        let payload = serde_json::to_vec(&batch).expect("batch serializes");
        let co = ContentObject::new(interest.name.clone(), payload, 0).signed_by(&self.creds);
        debug_assert_eq!(co.name, topic_name(&self.cfg.id, meta.batch));
        self.outbox.push_back((meta.batch, co.clone()));
        while self.outbox.len() > OUTBOX {
            self.outbox.pop_front();
        }
        meta.batch += 1;
        if let Err(e) = self.store.set_meta(meta).and_then(|_| self.store.commit()) {
            log::error!("engine {}: persisting metadata failed: {e}", self.cfg.id);
        }
        vec![Packet::Content(co)]
    }

    fn publish(&mut self, transitions: Vec<(u32, Direction)>) {
        let mut meta = self.store.meta();
        for (bucket, direction) in transitions {
            meta.pub_seq += 1;
            self.stats.publications += 1;
            self.pending_pubs.push(BfPublication { engine_id: self.cfg.id.clone(), bucket, direction, seq: meta.pub_seq });
        }
        if let Err(e) = self.store.set_meta(meta) {
            log::error!("engine {}: persisting metadata failed: {e}", self.cfg.id);
        }
    }

    /// Classifies a signature check; `Err` carries a certificate to fetch.
    fn admit(&self, kind: PacketKind, name: &Name, payload: &[u8], sig: Option<&TrustEnvelope>) -> Result<Option<String>, Name> {
        match self.validator.check(kind, name, payload, sig) {
            CheckOutcome::Accept => Ok(None),
            CheckOutcome::Reject(r) => Ok(Some(r.to_string())),
            CheckOutcome::NeedCert(id) if self.unavailable_certs.contains(&id) => Ok(Some(Rejection::CertUnavailable(id.to_string()).to_string())),
            CheckOutcome::NeedCert(id) => Err(id),
        }
    }

    fn insert_items(&mut self, items: &[ContentObject]) -> Result<Vec<ItemStatus>, Vec<Name>> {
        let mut verdicts = Vec::with_capacity(items.len());
        let mut missing = Vec::new();
        for co in items {
            let verdict = match OgbData::from_content(co) {
                Err(e) => Err(format!("malformed: {e}")),
                Ok(d) if !self.cfg.serves(&d.name.tile) => Err(format!("prefix of {} not served", co.name)),
                Ok(d) => match self.admit(PacketKind::DataContent, &co.name, &co.payload, co.signature.as_ref()) {
                    Ok(None) => Ok(d),
                    Ok(Some(reason)) => Err(reason),
                    Err(id) => {
                        missing.push(id);
                        Err(String::new())
                    }
                },
            };
            verdicts.push(verdict);
        }
        if !missing.is_empty() {
            return Err(missing);
        }
        let mut statuses = Vec::with_capacity(items.len());
        let mut transitions = Vec::new();
        for v in verdicts {
            let status = match v {
                Err(reason) => {
                    self.stats.items_rejected += 1;
                    ItemStatus::Rejected(reason)
                }
                Ok(d) => {
                    let key = tile_prefix(&d.name.tile).to_string();
                    match self.store.put(d) {
                        Ok(true) => ItemStatus::Replaced,
                        Ok(false) => {
                            self.stats.inserted += 1;
                            transitions.extend(self.cbf.insert_key(&key));
                            ItemStatus::Inserted
                        }
                        Err(e) => ItemStatus::Rejected(format!("storage: {e}")),
                    }
                }
            };
            statuses.push(status);
        }
        self.publish(transitions);
        Ok(statuses)
    }

    fn delete_items(&mut self, items: &[DeleteItem]) -> Result<Vec<ItemStatus>, Vec<Name>> {
        let mut verdicts = Vec::with_capacity(items.len());
        let mut missing = Vec::new();
        for it in items {
            let verdict = match parse(&it.name) {
                Ok(ParsedName::Data(d)) if self.cfg.serves(&d.tile) => match self.admit(PacketKind::DataContent, &it.name, DELETE_TAG, Some(&it.signature)) {
                    Ok(None) => Ok(d),
                    Ok(Some(reason)) => Err(reason),
                    Err(id) => {
                        missing.push(id);
                        Err(String::new())
                    }
                },
                Ok(ParsedName::Data(_)) => Err(format!("prefix of {} not served", it.name)),
                _ => Err(format!("{} is not a DATA name", it.name)),
            };
            verdicts.push(verdict);
        }
        if !missing.is_empty() {
            return Err(missing);
        }
        let mut statuses = Vec::new();
        let mut transitions = Vec::new();
        for v in verdicts {
            statuses.push(match v {
                Err(reason) => {
                    self.stats.items_rejected += 1;
                    ItemStatus::Rejected(reason)
                }
                Ok(d) => match self.store.delete(&d) {
                    Ok(Some(_)) => {
                        self.stats.deleted += 1;
                        transitions.extend(self.cbf.remove_key(&tile_prefix(&d.tile).to_string()));
                        ItemStatus::Deleted
                    }
                    Ok(None) => ItemStatus::NotFound,
                    Err(e) => ItemStatus::Rejected(format!("storage: {e}")),
                },
            });
        }
        self.publish(transitions);
        Ok(statuses)
    }

    /// Runs a bulk operation, or parks it until certificates arrive.
    fn run_op(&mut self, token: u64, frame: Frame, h: &mut Handled) {
        let result = match &frame {
            Frame::BulkInsert { items } => self.insert_items(items),
            Frame::BulkDelete { items } => self.delete_items(items),
            _ => unreachable!("only bulk frames are parked"),
        };
        match result {
            Ok(statuses) => {
                self.responses.clear();
                self.response_order.clear();
                if let Err(e) = self.store.commit() {
                    log::error!("engine {}: commit failed: {e}", self.cfg.id);
                }
                h.late_replies.push((token, Frame::BulkReply { statuses }));
                h.out.extend(self.flush_publications());
            }
            Err(missing) => {
                for id in missing {
                    if self.requested_certs.insert(id.clone()) {
                        let nonce = self.next_nonce();
                        h.out.push(Packet::Interest(Interest::new(cert_repo_name(&id), nonce)));
                    }
                }
                self.waiting_ops.push_back((token, frame));
            }
        }
    }

    fn retry_waiting(&mut self, h: &mut Handled) {
        let ops: Vec<(u64, Frame)> = self.waiting_ops.drain(..).collect();
        for (token, frame) in ops {
            self.run_op(token, frame, h);
        }
        if self.waiting_ops.is_empty() {
            self.unavailable_certs.clear();
        }
    }

    fn cert_result(&mut self, id: Name, cert: Option<Certificate>) -> Handled {
        self.requested_certs.remove(&id);
        match cert {
            Some(c) if c.identity == id => self.validator.add_certificate(c),
            _ => {
                self.unavailable_certs.insert(id);
            }
        }
        let mut h = Handled::none();
        self.retry_waiting(&mut h);
        h
    }
}

impl App for Engine {
    fn on_interest(&mut self, _now: f64, interest: &Interest) -> Handled {
        self.stats.interests_received += 1;
        if let Some((eid, batch)) = parse_topic_name(&interest.name) {
            if eid == self.cfg.id {
                return self.subscription(interest, batch);
            }
            return Self::nack(interest);
        }
        let (base, seg) = split_segment(&interest.name).unwrap_or_else(|| (interest.name.clone(), 0));
        match parse(&base) {
            Ok(ParsedName::Tile(tn)) => self.tile_query(interest, base, tn, seg),
            Ok(ParsedName::IpRes(r)) if base == interest.name => self.ipres(interest, r),
            Ok(ParsedName::Data(d)) if base == interest.name && self.cfg.serves(&d.tile) => match self.store.get(&base) {
                Some(item) => {
                    self.stats.data_gets += 1;
                    Handled::packets(vec![Packet::Content(item.to_content())])
                }
                None => Self::nack(interest),
            },
            _ => Self::nack(interest),
        }
    }

    fn on_content(&mut self, _now: f64, co: &ContentObject) -> Handled {
        match identity_from_repo_name(&co.name) {
            Some(id) => {
                let cert = serde_json::from_slice::<Certificate>(&co.payload).ok();
                self.cert_result(id, cert)
            }
            None => Handled::none(),
        }
    }

    fn on_nack(&mut self, _now: f64, nack: &Nack) -> Handled {
        match identity_from_repo_name(&nack.name) {
            Some(id) => self.cert_result(id, None),
            None => Handled::none(),
        }
    }

    fn on_direct(&mut self, _now: f64, token: u64, msg: Frame) -> Handled {
        match msg {
            f @ (Frame::BulkInsert { .. } | Frame::BulkDelete { .. }) => {
                let mut h = Handled::none();
                self.run_op(token, f, &mut h);
                h
            }
            Frame::DigestRequest => Handled::reply(Frame::Digest { digest: self.digest() }),
            Frame::Stats => Handled::reply(Frame::StatsReply { stats: serde_json::to_value(&self.stats).unwrap_or_default() }),
            other => Handled::reply(Frame::Error { message: format!("engine cannot handle {other:?}") }),
        }
    }

    fn prefixes(&self) -> Vec<Name> {
        let mut p = self.cfg.routing_prefixes();
        p.push(engine_topic(&self.cfg.id));
        p
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
