//! Query and insert handlers.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geodata::{make_ogb_data_set, post_filter, FilterMode, GeoError, GeoFeature, OgbBody, OgbData, OgbTile};
use crate::grid::{ancestor, BoundingBox, TileId};
use crate::icn::{Address, FetchRequest, IcnError, Substrate};
use crate::naming::{parse, DataName, IpResName, Name, ParsedName, TileName};
use crate::perfmodel::ProcessingCosts;
use crate::tessellation::{constrained_tiles, TessellationError};
use crate::trust::{cert_repo_name, user_identity, Certificate, Credentials, PacketKind, Rejection, Role, Validator};
use crate::wire::{DeleteItem, Frame, ItemStatus, DELETE_TAG};

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_WINDOW: usize = 8;

fn default_k() -> usize {
    DEFAULT_K
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeQuery {
    pub bbox: BoundingBox,
    pub mode: FilterMode,
    pub tid: String,
    pub cid: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(rename = "useBf", default)]
    pub use_bf: bool,
    #[serde(default = "default_window")]
    pub window: usize,
}

impl RangeQuery {
    pub fn new(bbox: BoundingBox, mode: FilterMode, tid: &str, cid: &str) -> Self {
        RangeQuery { bbox, mode, tid: tid.into(), cid: cid.into(), k: DEFAULT_K, use_bf: false, window: DEFAULT_WINDOW }
    }

    pub fn with_bf(mut self, on: bool) -> Self {
        self.use_bf = on;
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTimings {
    #[serde(rename = "tessellationMs")]
    pub tessellation_ms: f64,
    #[serde(rename = "bfMs")]
    pub bf_ms: f64,
    #[serde(rename = "tileQueryBatchMs")]
    pub tile_query_batch_ms: f64,
    #[serde(rename = "postFilterMs")]
    pub post_filter_ms: f64,
    #[serde(rename = "totalMs")]
    pub total_ms: f64,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCounts {
    #[serde(rename = "tilesTessellated")]
    pub tiles_tessellated: usize,
    #[serde(rename = "tilesQueried")]
    pub tiles_queried: usize,
    #[serde(rename = "itemsFetched")]
    pub items_fetched: usize,
    #[serde(rename = "itemsRejected")]
    pub items_rejected: usize,
    #[serde(rename = "referencesFetched")]
    pub references_fetched: usize,
    #[serde(rename = "itemsAfterFilter")]
    pub items_after_filter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedTile {
    pub name: Name,
    pub error: String,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub features: Vec<serde_json::Value>,
    pub timings: QueryTimings,
    pub counts: QueryCounts,
    #[serde(rename = "constraintViolated")]
    pub constraint_violated: bool,
    pub stretch: f64,
    #[serde(rename = "failedTiles", default, skip_serializing_if = "Vec::is_empty")]
    pub failed_tiles: Vec<FailedTile>,
}

impl QueryReport {
    pub fn oids(&self) -> Vec<String> {
        self.features
            .iter()
            .map(|f| match &f["properties"]["oid"] {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FrontendError {
    #[error("not authorized: {0}")]
    Unauthorized(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("{} tile-queries failed", .report.failed_tiles.len())]
    PartialResult { report: Box<QueryReport> },
    #[error("no engine reachable for tile {0}")]
    Unroutable(String),
    #[error("network: {0}")]
    Network(#[from] IcnError),
    #[error("tessellation: {0}")]
    Tessellation(#[from] TessellationError),
    #[error("data: {0}")]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineWrite {
    pub address: Address,
    pub items: Vec<Name>,
    pub statuses: Vec<ItemStatus>,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteReport {
    pub engines: Vec<EngineWrite>,
    /// Address resolutions sent on the network.
    pub resolutions: usize,
    pub errors: Vec<String>,
}

impl WriteReport {
    pub fn count(&self, pred: impl Fn(&ItemStatus) -> bool) -> usize {
        self.engines.iter().flat_map(|e| &e.statuses).filter(|s| pred(s)).count()
    }

    pub fn all_ok(&self) -> bool {
        self.errors.is_empty() && self.engines.iter().flat_map(|e| &e.statuses).all(ItemStatus::is_ok)
    }
}

/// Query-handler and insert-handler for one user.
pub struct FrontEnd {
    creds: Arc<Credentials>,
    validator: Arc<Validator>,
    bf_server: Option<Address>,
    costs: Option<ProcessingCosts>,
    addresses: HashMap<TileId, (Address, f64)>,
    item_freshness_ms: u64,
}

impl FrontEnd {
    pub fn new(creds: Arc<Credentials>, validator: Arc<Validator>, bf_server: Option<Address>) -> Self {
        FrontEnd { creds, validator, bf_server, costs: None, addresses: HashMap::new(), item_freshness_ms: 60_000 }
    }

    /// Charges query-handler work per the timing model.
    pub fn with_costs(mut self, costs: Option<ProcessingCosts>) -> Self {
        self.costs = costs;
        self
    }

    pub fn credentials(&self) -> &Arc<Credentials> {
        &self.creds
    }

    pub fn forget_addresses(&mut self) {
        self.addresses.clear();
    }

    fn user(&self) -> Result<(String, String), FrontendError> {
        match self.creds.role() {
            Some(Role::User { tid, uid }) => Ok((tid, uid)),
            _ => Err(FrontendError::Unauthorized(format!("{} is not a user identity", self.creds.identity()))),
        }
    }

    fn fetch_cert(sub: &mut dyn Substrate, id: &Name) -> Option<Certificate> {
        let got = sub.fetch(vec![FetchRequest::plain(cert_repo_name(id))], 1).pop()?.ok()?;
        serde_json::from_slice(&got.payload).ok()
    }

    fn verify(&self, sub: &mut dyn Substrate, kind: PacketKind, name: &Name, payload: &[u8], sig: Option<&crate::trust::TrustEnvelope>) -> Result<(), Rejection> {
        self.validator.verify(kind, name, payload, sig, &mut |id| Self::fetch_cert(sub, id))
    }

    pub fn tessellate(bbox: &BoundingBox, k: usize) -> Result<(crate::tessellation::Tessellation, Vec<TileId>), FrontendError> {
        Ok(constrained_tiles(bbox, k)?)
    }

    fn bf_filter(&self, sub: &mut dyn Substrate, tiles: Vec<TileId>) -> Result<Vec<TileId>, FrontendError> {
        let Some(addr) = &self.bf_server else { return Ok(tiles) };
        let prefixes: Vec<String> = tiles.iter().map(|t| crate::naming::tile_prefix(t).to_string()).collect();
        match sub.call(addr, Frame::BfQuery { prefixes })? {
            Frame::BfReply { bits } if bits.len() == tiles.len() => Ok(tiles.into_iter().zip(bits).filter(|(_, b)| *b).map(|(t, _)| t).collect()),
            other => Err(FrontendError::Network(IcnError::Malformed(format!("unexpected bf reply {other:?}")))),
        }
    }

    /// Fetches and verifies tiles; returns decoded tiles in request order.
    pub fn fetch_tiles(
        &self,
        sub: &mut dyn Substrate,
        names: &[TileName],
        window: usize,
    ) -> (Vec<Result<OgbTile, String>>, usize) {
        let reqs = names.iter().map(|n| FetchRequest::segmented(n.to_name(), Some(self.creds.clone()))).collect();
        let fetched = sub.fetch(reqs, window.max(1));
        let mut out = Vec::with_capacity(names.len());
        let mut total_items = 0;
        for r in fetched {
            let tile = r.map_err(|e| e.to_string()).and_then(|f| {
                for s in &f.segments {
                    self.verify(sub, PacketKind::TileContent, &s.name, &s.payload, s.signature.as_ref()).map_err(|e| format!("segment {}: {e}", s.name))?;
                }
                OgbTile::decode(&f.payload).map_err(|e| e.to_string())
            });
            if let Ok(t) = &tile {
                total_items += t.items.len();
            }
            out.push(tile);
        }
        if let Some(c) = self.costs {
            let per: f64 = out.iter().map(|t| t.as_ref().map_or(0, |t| t.items.len())).map(|n| c.handler_ms(n)).sum();
            sub.charge(c.c3_ms + per);
        }
        (out, total_items)
    }

    pub fn range_query(&mut self, sub: &mut dyn Substrate, q: &RangeQuery) -> Result<QueryReport, FrontendError> {
        if q.k == 0 || q.window == 0 {
            return Err(FrontendError::Invalid("k and window must be at least 1".into()));
        }
        let (tid, _) = self.user()?;
        if tid != q.tid {
            return Err(FrontendError::Unauthorized(format!("credentials of tenant {tid} cannot query tenant {}", q.tid)));
        }
        let mut report = QueryReport::default();
        let t0 = sub.now_ms();

        let (tess, tiles) = Self::tessellate(&q.bbox, q.k)?;
        report.constraint_violated = tess.constraint_violated;
        report.stretch = tess.stretch;
        report.counts.tiles_tessellated = tiles.len();
        let t1 = sub.now_ms();
        report.timings.tessellation_ms = t1 - t0;

        let tiles = if q.use_bf { self.bf_filter(sub, tiles)? } else { tiles };
        let t2 = sub.now_ms();
        report.timings.bf_ms = t2 - t1;
        report.counts.tiles_queried = tiles.len();

        let names: Vec<TileName> = tiles.iter().map(|t| TileName::new(t.clone(), &q.tid, &q.cid)).collect::<Result<_, _>>().map_err(|e| FrontendError::Invalid(e.to_string()))?;
        let (fetched, _) = self.fetch_tiles(sub, &names, q.window);
        let t3 = sub.now_ms();
        report.timings.tile_query_batch_ms = t3 - t2;

        let mut items: Vec<OgbData> = Vec::new();
        for (name, r) in names.iter().zip(fetched) {
            match r {
                Ok(tile) if tile.name == *name => items.extend(tile.items),
                Ok(tile) => report.failed_tiles.push(FailedTile { name: name.to_name(), error: format!("answer carries tile {}", tile.name.to_name()) }),
                Err(error) => report.failed_tiles.push(FailedTile { name: name.to_name(), error }),
            }
        }
        report.counts.items_fetched = items.len();

        // Canonical bodies seen in this query, by canonical name.
        let mut memo: HashMap<DataName, Option<GeoFeature>> = HashMap::new();
        let mut accepted = Vec::with_capacity(items.len());
        for d in items {
            let name = d.name.to_name();
            if let Err(e) = self.verify(sub, PacketKind::DataContent, &name, &d.payload(), d.signature.as_ref()) {
                log::debug!("item {name} rejected: {e}");
                report.counts.items_rejected += 1;
                continue;
            }
            if let OgbBody::Inline(f) = &d.body {
                memo.insert(d.name.clone(), Some(f.clone()));
            }
            accepted.push(d);
        }
        let mut features = Vec::new();
        for d in accepted {
            match d.body {
                OgbBody::Inline(f) => features.push(f),
                OgbBody::Reference(target) => {
                    if !memo.contains_key(&target) {
                        let f = self.dereference(sub, &target);
                        report.counts.references_fetched += 1;
                        memo.insert(target.clone(), f);
                    }
                    match memo.get(&target) {
                        Some(Some(f)) => features.push(f.clone()),
                        _ => report.counts.items_rejected += 1,
                    }
                }
            }
        }
        let kept = post_filter(features, &q.bbox, q.mode);
        report.counts.items_after_filter = kept.len();
        report.features = kept.iter().map(GeoFeature::to_value).collect();
        let t4 = sub.now_ms();
        report.timings.post_filter_ms = t4 - t3;
        report.timings.total_ms = t4 - t0;
        if report.failed_tiles.is_empty() {
            Ok(report)
        } else {
            Err(FrontendError::PartialResult { report: Box::new(report) })
        }
    }

    fn dereference(&self, sub: &mut dyn Substrate, target: &DataName) -> Option<GeoFeature> {
        let name = target.to_name();
        let got = sub.fetch(vec![FetchRequest { name: name.clone(), segmented: false, signer: Some(self.creds.clone()) }], 1).pop()?.ok()?;
        let co = got.segments.first()?;
        let d = OgbData::from_content(co).ok()?;
        self.verify(sub, PacketKind::DataContent, &name, &d.payload(), d.signature.as_ref()).ok()?;
        match d.body {
            OgbBody::Inline(f) => Some(f),
            OgbBody::Reference(_) => None,
        }
    }

    /// Resolves the engine address responsible for `tile`.
    pub fn resolve(&mut self, sub: &mut dyn Substrate, tile: &TileId, report: &mut WriteReport) -> Result<Address, FrontendError> {
        let zone = ancestor(tile, 0).map_err(|e| FrontendError::Invalid(e.to_string()))?;
        let now = sub.now_ms();
        if let Some((a, expires)) = self.addresses.get(&zone) {
            if *expires > now {
                return Ok(a.clone());
            }
        }
        let name = IpResName { tile: zone.clone() }.to_name();
        report.resolutions += 1;
        let got = sub.fetch(vec![FetchRequest::plain(name.clone())], 1).pop().unwrap_or(Err(IcnError::NoRoute(name.to_string())));
        let got = got.map_err(|_| FrontendError::Unroutable(crate::naming::tile_prefix(&zone).to_string()))?;
        let co = got.segments.first().ok_or_else(|| FrontendError::Network(IcnError::Malformed(name.to_string())))?;
        self.verify(sub, PacketKind::IpResContent, &co.name, &co.payload, co.signature.as_ref()).map_err(|e| FrontendError::Unauthorized(format!("address answer: {e}")))?;
        let addr: Address = serde_json::from_slice(&co.payload).map_err(|e| FrontendError::Network(IcnError::Malformed(e.to_string())))?;
        self.addresses.insert(zone, (addr.clone(), sub.now_ms() + co.freshness_ms as f64));
        Ok(addr)
    }

    fn check_owner(&self, f: &GeoFeature) -> Result<(), FrontendError> {
        f.validate()?;
        let (tid, uid) = self.user()?;
        if f.tid() != tid || f.uid() != uid {
            return Err(FrontendError::Unauthorized(format!("{} cannot write objects of {}", self.creds.identity(), user_identity(&f.tid(), &f.uid()))));
        }
        Ok(())
    }

    /// Groups per-tile work by responsible engine.
    fn route<T>(&mut self, sub: &mut dyn Substrate, work: Vec<(TileId, Name, T)>, report: &mut WriteReport) -> BTreeMap<Address, Vec<(Name, T)>> {
        let mut by_engine: BTreeMap<Address, Vec<(Name, T)>> = BTreeMap::new();
        for (tile, name, item) in work {
            match self.resolve(sub, &tile, report) {
                Ok(a) => by_engine.entry(a).or_default().push((name, item)),
                Err(e) => report.errors.push(format!("{name}: {e}")),
            }
        }
        by_engine
    }

    fn push(sub: &mut dyn Substrate, addr: Address, names: Vec<Name>, frame: Frame, report: &mut WriteReport) {
        match sub.call(&addr, frame) {
            Ok(Frame::BulkReply { statuses }) if statuses.len() == names.len() => report.engines.push(EngineWrite { address: addr, items: names, statuses }),
            Ok(other) => report.errors.push(format!("{addr}: unexpected reply {other:?}")),
            Err(e) => report.errors.push(format!("{addr}: {e}")),
        }
    }

    pub fn insert(&mut self, sub: &mut dyn Substrate, f: &GeoFeature) -> Result<WriteReport, FrontendError> {
        self.insert_batch(sub, std::slice::from_ref(f))
    }

    /// Inserts several features with one bulk channel per engine.
    pub fn insert_batch(&mut self, sub: &mut dyn Substrate, features: &[GeoFeature]) -> Result<WriteReport, FrontendError> {
        let mut work = Vec::new();
        for f in features {
            self.check_owner(f)?;
            for mut d in make_ogb_data_set(f, self.item_freshness_ms)? {
                d.sign(&self.creds);
                work.push((d.name.tile.clone(), d.name.to_name(), d.to_content()));
            }
        }
        let mut report = WriteReport::default();
        for (addr, items) in self.route(sub, work, &mut report) {
            let (names, items): (Vec<_>, Vec<_>) = items.into_iter().unzip();
            Self::push(sub, addr, names, Frame::BulkInsert { items }, &mut report);
        }
        Ok(report)
    }

    pub fn remove(&mut self, sub: &mut dyn Substrate, f: &GeoFeature) -> Result<WriteReport, FrontendError> {
        self.check_owner(f)?;
        let mut work = Vec::new();
        for d in make_ogb_data_set(f, self.item_freshness_ms)? {
            let name = d.name.to_name();
            let signature = self.creds.sign(&name, DELETE_TAG);
            work.push((d.name.tile.clone(), name.clone(), DeleteItem { name, signature }));
        }
        let mut report = WriteReport::default();
        for (addr, items) in self.route(sub, work, &mut report) {
            let (names, items): (Vec<_>, Vec<_>) = items.into_iter().unzip();
            Self::push(sub, addr, names, Frame::BulkDelete { items }, &mut report);
        }
        Ok(report)
    }
}

/// Tile name of a parsed name, if it is one.
pub fn as_tile_name(name: &Name) -> Option<TileName> {
    match parse(name).ok()? {
        ParsedName::Tile(t) => Some(t),
        _ => None,
    }
}
