//! Simulated-time benchmark runs.
//!
//! A scenario names the model constants and the axes to sweep. Each point
//! runs one batch of tile-queries through a simulated cluster whose engines
//! and query handler charge the model's processing costs, and reports the
//! measured batch time next to the closed form.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{batch_duration, ModelError, ModelParams, ProcessingCosts};
use crate::cluster::{ClusterConfig, SimCluster};
use crate::geodata::{GeoFeature, OgbBody, OgbData};
use crate::grid::{GeoPoint, Geometry, TileId};
use crate::naming::{parse, DataName, Name, ParsedName, TileName};

pub const TID: &str = "Bench";
pub const CID: &str = "Batch";
pub const UID: &str = "runner";
/// Level of the benchmark tiles.
pub const TILE_LEVEL: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Nq,
    Ni,
    Ndb,
    H,
}

fn default_nq() -> Vec<usize> {
    vec![500]
}
fn default_ni() -> Vec<usize> {
    vec![100]
}
fn default_ndb() -> Vec<usize> {
    vec![1]
}
fn default_h() -> Vec<f64> {
    vec![0.0]
}
fn default_tolerance() -> f64 {
    0.10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub sweep: Axis,
    #[serde(default)]
    pub costs: ProcessingCosts,
    #[serde(default = "default_nq")]
    pub nq: Vec<usize>,
    #[serde(default = "default_ni")]
    pub ni: Vec<usize>,
    #[serde(default = "default_ndb")]
    pub ndb: Vec<usize>,
    #[serde(default = "default_h")]
    pub h: Vec<f64>,
    /// Concurrent tile-queries; defaults to the whole batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Accepted relative error per point.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Scenario(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ModelError::Scenario(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self, engines_available: Option<usize>) -> Result<(), ModelError> {
        self.costs.validate()?;
        if self.nq.is_empty() || self.ni.is_empty() || self.ndb.is_empty() || self.h.is_empty() {
            return Err(ModelError::Scenario("every axis needs at least one value".into()));
        }
        if let Some(&bad) = self.h.iter().find(|h| !(0.0..=1.0).contains(*h)) {
            return Err(ModelError::Scenario(format!("H = {bad} outside [0, 1]")));
        }
        if self.ndb.contains(&0) {
            return Err(ModelError::Scenario("Ndb must be at least 1".into()));
        }
        if let (Some(avail), Some(&max)) = (engines_available, self.ndb.iter().max()) {
            if max > avail {
                return Err(ModelError::Scenario(format!("scenario needs {max} engines, cluster has {avail}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "sweepValue")]
    pub sweep_value: f64,
    #[serde(rename = "measuredMs")]
    pub measured_ms: f64,
    #[serde(rename = "predictedMs")]
    pub predicted_ms: f64,
    #[serde(rename = "relErr")]
    pub rel_err: f64,
    pub ndb: usize,
    pub ni: usize,
    pub nq: usize,
    pub h: f64,
    /// Tile-queries the engines actually processed.
    #[serde(rename = "engineQueries")]
    pub engine_queries: u64,
}

impl BenchRow {
    pub fn within(&self, tol: f64) -> bool {
        self.rel_err <= tol
    }
}

/// A level-0 tile the engine serves, used to place its benchmark data.
fn home_tile(prefix: &Name) -> Option<TileId> {
    match parse(prefix) {
        Ok(ParsedName::TilePrefix(t)) => Some(t),
        _ => {
            let c = prefix.components();
            match c {
                [root, lng] if root == "OGB" => TileId::new(lng.parse().ok()?, 0, Vec::new()).ok(),
                [root, lng, lat] if root == "OGB" => TileId::new(lng.parse().ok()?, lat.parse().ok()?, Vec::new()).ok(),
                _ => None,
            }
        }
    }
}

/// `count` level-2 tiles inside `home`, each holding `ni` point items.
fn tile_data(home: &TileId, count: usize, ni: usize) -> (Vec<TileName>, Vec<OgbData>) {
    let scale = 10i64.pow(TILE_LEVEL as u32);
    let (bx, by) = (home.lng0() as i64 * scale, home.lat0() as i64 * scale);
    let mut names = Vec::with_capacity(count);
    let mut items = Vec::with_capacity(count * ni);
    for j in 0..count as i64 {
        let (ix, iy) = (bx + j % scale, by + j / scale);
        let tile = TileId::from_indices(TILE_LEVEL, ix, iy).expect("benchmark tile");
        let side = 1.0 / scale as f64;
        for n in 0..ni {
            let frac = (n as f64 + 0.5) / ni as f64;
            let p = GeoPoint { lng: (ix as f64 + frac) * side, lat: (iy as f64 + 0.5) * side };
            let oid = format!("{ix}x{iy}n{n}");
            let props = serde_json::json!({"oid": oid, "tid": TID, "uid": UID, "cid": CID});
            let serde_json::Value::Object(props) = props else { unreachable!() };
            let f = GeoFeature::new(Geometry::Point(p), props).expect("benchmark feature");
            let name = DataName::new(tile.clone(), TID, CID, UID, &oid).expect("benchmark name");
            items.push(OgbData { name, body: OgbBody::Inline(f), freshness_ms: 3_600_000, signature: None });
        }
        names.push(TileName::new(tile, TID, CID).expect("benchmark tile name"));
    }
    (names, items)
}

struct World {
    cluster: SimCluster,
    fe: crate::frontend::FrontEnd,
    warmer: crate::frontend::FrontEnd,
    /// Tiles per engine, in engine order.
    tiles: Vec<Vec<TileName>>,
}

fn build_world(base: &ClusterConfig, costs: ProcessingCosts, ndb: usize, ni: usize, per_engine: usize, seed: u64) -> Result<World, ModelError> {
    let mut cfg = base.clone();
    cfg.engines.truncate(ndb);
    cfg.bf_server = None;
    cfg.costs = Some(costs);
    cfg.seed = Some(seed);
    cfg.data_dir = None;
    for e in &mut cfg.engines {
        e.cache_capacity = e.cache_capacity.max(8 * per_engine);
        // Cached tiles must not expire during a run.
        e.default_freshness_ms = 3_600_000;
    }
    let mut cluster = SimCluster::new(cfg.clone()).map_err(|e| ModelError::Scenario(e.to_string()))?;
    let mut tiles = Vec::new();
    let mut all = Vec::new();
    for e in &cfg.engines {
        let home = e.served_prefixes.iter().find_map(home_tile).ok_or_else(|| ModelError::Scenario(format!("engine {} has no tile to hold data", e.id)))?;
        let (names, items) = tile_data(&home, per_engine, ni);
        tiles.push(names);
        all.extend(items);
    }
    cluster.preload(all).map_err(|e| ModelError::Scenario(e.to_string()))?;
    let user = cluster.issue_user(TID, UID).map_err(|e| ModelError::Scenario(e.to_string()))?;
    let warmer = cluster.frontend(user.clone()).with_costs(None);
    let fe = cluster.frontend(user).with_costs(Some(costs));
    // Let the handler learn the engine certificates outside any measurement.
    let probe: Vec<TileName> = tiles.iter().map(|t| t[0].clone()).collect();
    for h in [&fe, &warmer] {
        let (got, _) = h.fetch_tiles(&mut cluster.endpoint(), &probe, probe.len());
        if let Some(e) = got.into_iter().find_map(Result::err) {
            return Err(ModelError::Scenario(format!("probe failed: {e}")));
        }
    }
    Ok(World { cluster, fe, warmer, tiles })
}

fn run_point(w: &mut World, nq: usize, h: f64, window: Option<usize>) -> Result<(f64, u64), ModelError> {
    let ndb = w.tiles.len();
    // Tile j of the batch goes to engine j mod Ndb.
    let mut per_engine: Vec<Vec<TileName>> = vec![Vec::new(); ndb];
    for j in 0..nq {
        let e = j % ndb;
        per_engine[e].push(w.tiles[e][j / ndb].clone());
    }
    let batch: Vec<TileName> = (0..nq).map(|j| per_engine[j % ndb][j / ndb].clone()).collect();
    let warm: Vec<TileName> = per_engine.iter().flat_map(|ts| ts[..(h * ts.len() as f64).round() as usize].iter().cloned()).collect();

    w.cluster.flush_caches();
    let window = window.unwrap_or(nq).max(1);
    if !warm.is_empty() {
        let (got, _) = w.warmer.fetch_tiles(&mut w.cluster.endpoint(), &warm, window);
        if let Some(e) = got.into_iter().find_map(Result::err) {
            return Err(ModelError::Scenario(format!("warm-up failed: {e}")));
        }
    }
    w.cluster.net.run_until_idle();
    w.cluster.reset_engine_stats();
    let t0 = w.cluster.net.now();
    let (got, _) = w.fe.fetch_tiles(&mut w.cluster.endpoint(), &batch, window);
    let measured = w.cluster.net.now() - t0;
    if let Some(e) = got.into_iter().find_map(Result::err) {
        return Err(ModelError::Scenario(format!("tile-query failed: {e}")));
    }
    let processed = w.cluster.engine_stats().values().map(|s| s.tile_queries_processed).sum();
    Ok((measured, processed))
}

/// Runs every point of the scenario. `base` supplies the engines; without it
/// each engine serves its own level-0 tile.
pub fn bench_run(s: &Scenario, base: Option<&ClusterConfig>) -> Result<Vec<BenchRow>, ModelError> {
    s.validate(base.map(|b| b.engines.len()))?;
    let max_ndb = *s.ndb.iter().max().unwrap();
    let default_base;
    let base = match base {
        Some(b) => b,
        None => {
            let homes: Vec<TileId> = (0..max_ndb).map(|i| TileId::new(10 + i as i32, 40, Vec::new()).unwrap()).collect();
            default_base = ClusterConfig::per_tile(&homes);
            &default_base
        }
    };
    let max_nq = *s.nq.iter().max().unwrap();
    let seed = s.seed.unwrap_or(7);
    let worlds: Vec<(usize, usize)> = s.ndb.iter().flat_map(|&ndb| s.ni.iter().map(move |&ni| (ndb, ni))).collect();
    // Worlds are independent simulations; run them side by side.
    let per_world: Vec<Result<Vec<BenchRow>, ModelError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = worlds
            .iter()
            .map(|&(ndb, ni)| scope.spawn(move || run_world(s, base, ndb, ni, max_nq, seed)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(ModelError::Scenario("benchmark thread panicked".into())))).collect()
    });
    let mut rows = Vec::new();
    for r in per_world {
        rows.extend(r?);
    }
    Ok(rows)
}

fn run_world(s: &Scenario, base: &ClusterConfig, ndb: usize, ni: usize, max_nq: usize, seed: u64) -> Result<Vec<BenchRow>, ModelError> {
    let mut world = build_world(base, s.costs, ndb, ni, max_nq.div_ceil(ndb), seed)?;
    let mut rows = Vec::new();
    for &h in &s.h {
        for &nq in &s.nq {
            let (measured, processed) = run_point(&mut world, nq, h, s.window)?;
            let predicted = batch_duration(&ModelParams { costs: s.costs, h, ndb, nq, ni });
            let sweep_value = match s.sweep {
                Axis::Nq => nq as f64,
                Axis::Ni => ni as f64,
                Axis::Ndb => ndb as f64,
                Axis::H => h,
            };
            let rel_err = (measured - predicted).abs() / predicted;
            rows.push(BenchRow { sweep_value, measured_ms: measured, predicted_ms: predicted, rel_err, ndb, ni, nq, h, engine_queries: processed });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
