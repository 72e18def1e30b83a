//! Python bindings. Structured values cross the boundary as JSON and come
//! out as plain dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde_json::Value;

use tilebase::cluster::{ClusterConfig, SimCluster};
use tilebase::frontend::{FrontEnd, RangeQuery, DEFAULT_K};
use tilebase::geodata::{parse_features, FilterMode, GeoFeature};
use tilebase::naming::{parse_str, tile_prefix, ParsedName};
use tilebase::perfmodel::{batch_duration, ModelParams, ProcessingCosts};
use tilebase::trust::Credentials;
use tilebase::{BoundingBox, GeoPoint};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// JSON text of a str, or of any value `json.dumps` accepts.
fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.cast::<PyString>() {
        return Ok(s.to_str()?.to_owned());
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn to_bbox(b: (f64, f64, f64, f64)) -> PyResult<BoundingBox> {
    BoundingBox::from_coords(b.0, b.1, b.2, b.3).map_err(value_err)
}

/// Tile-prefix of the tile holding (lng, lat) at `level`.
#[pyfunction]
#[pyo3(signature = (lng, lat, level=2))]
fn tile_prefix_of(lng: f64, lat: f64, level: u8) -> PyResult<String> {
    let t = tilebase::grid::locate(&GeoPoint { lng, lat }, level).map_err(value_err)?;
    Ok(tile_prefix(&t).to_string())
}

/// Kind of a name and its canonical form.
#[pyfunction]
fn parse_name(text: &str) -> PyResult<(String, String)> {
    let p = parse_str(text).map_err(value_err)?;
    let kind = match &p {
        ParsedName::TilePrefix(_) => "tile-prefix",
        ParsedName::Data(_) => "data",
        ParsedName::Tile(_) => "tile",
        ParsedName::IpRes(_) => "ip-res",
        ParsedName::Segment { .. } => "segment",
    };
    Ok((kind.to_string(), p.to_name().to_string()))
}

/// Constrained tessellation of (min_lng, min_lat, max_lng, max_lat).
#[pyfunction]
#[pyo3(signature = (bbox, k=DEFAULT_K))]
fn tessellate<'py>(py: Python<'py>, bbox: (f64, f64, f64, f64), k: usize) -> PyResult<Bound<'py, PyAny>> {
    let (t, tiles) = FrontEnd::tessellate(&to_bbox(bbox)?, k).map_err(value_err)?;
    let prefixes: Vec<String> = tiles.iter().map(|t| tile_prefix(t).to_string()).collect();
    to_py(
        py,
        &serde_json::json!({"prefixes": prefixes, "stretch": t.stretch, "constraintViolated": t.constraint_violated, "levels": t.level_counts()}),
    )
}

/// Closed-form batch duration in ms. `costs` overrides the default constants
/// by key (C1, C2, C3, Pdb, Pqh, Ds, Bw).
#[pyfunction]
#[pyo3(signature = (nq, ni, ndb=1, h=0.0, costs=None))]
fn model_batch_ms(nq: usize, ni: usize, ndb: usize, h: f64, costs: Option<&Bound<'_, PyAny>>) -> PyResult<f64> {
    let costs = match costs {
        None => ProcessingCosts::default(),
        Some(c) => {
            let mut base = serde_json::to_value(ProcessingCosts::default()).map_err(runtime_err)?;
            let over: serde_json::Map<String, Value> = serde_json::from_str(&json_text(c)?).map_err(value_err)?;
            for (k, v) in over {
                base[k] = v;
            }
            serde_json::from_value(base).map_err(value_err)?
        }
    };
    let p = ModelParams { costs, h, ndb, nq, ni };
    p.validate().map_err(value_err)?;
    Ok(batch_duration(&p))
}

/// Stops of a GTFS feed as one MultiPoint feature.
#[pyfunction]
fn ingest_gtfs<'py>(py: Python<'py>, source: PathBuf, url: &str, tid: &str, cid: &str, uid: &str) -> PyResult<Bound<'py, PyAny>> {
    let feed = tilebase::gtfs::GtfsFeed { source, url: url.into() };
    let ing = tilebase::gtfs::ingest_gtfs(&feed, tid, cid, uid).map_err(value_err)?;
    to_py(py, &serde_json::json!({"feature": ing.feature.to_value(), "stops": ing.stops, "warnings": ing.warnings}))
}

/// A whole deployment in simulated time.
#[pyclass(unsendable)]
struct Cluster {
    inner: SimCluster,
    users: BTreeMap<(String, String), Arc<Credentials>>,
}

impl Cluster {
    fn user(&mut self, tid: &str, uid: &str) -> PyResult<Arc<Credentials>> {
        if let Some(c) = self.users.get(&(tid.into(), uid.into())) {
            return Ok(c.clone());
        }
        let c = self.inner.issue_user(tid, uid).map_err(runtime_err)?;
        self.users.insert((tid.into(), uid.into()), c.clone());
        Ok(c)
    }

    fn features(obj: &Bound<'_, PyAny>) -> PyResult<Vec<GeoFeature>> {
        parse_features(json_text(obj)?.as_bytes()).map_err(value_err)
    }
}

#[pymethods]
impl Cluster {
    /// `config` is a config dict or JSON text; `preset` is "single-engine" or "four-zones".
    #[new]
    #[pyo3(signature = (config=None, preset="single-engine", data_dir=None))]
    fn new(config: Option<&Bound<'_, PyAny>>, preset: &str, data_dir: Option<PathBuf>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(c) => serde_json::from_str(&json_text(c)?).map_err(value_err)?,
            None => match preset {
                "single-engine" => ClusterConfig::single_engine(),
                "four-zones" => ClusterConfig::four_zones(),
                other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
            },
        };
        if data_dir.is_some() {
            cfg.data_dir = data_dir;
        }
        Ok(Cluster { inner: SimCluster::new(cfg).map_err(value_err)?, users: BTreeMap::new() })
    }

    /// Inserts features (GeoJSON str, dict or list) as the users they name.
    fn insert<'py>(&mut self, py: Python<'py>, features: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let feats = Self::features(features)?;
        let mut reports = Vec::new();
        for f in &feats {
            let creds = self.user(&f.tid(), &f.uid())?;
            let mut fe = self.inner.frontend(creds);
            reports.push(self.inner.insert(&mut fe, std::slice::from_ref(f)).map_err(runtime_err)?);
        }
        to_py(py, &reports)
    }

    fn remove<'py>(&mut self, py: Python<'py>, features: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let feats = Self::features(features)?;
        let mut reports = Vec::new();
        for f in &feats {
            let creds = self.user(&f.tid(), &f.uid())?;
            let mut fe = self.inner.frontend(creds);
            reports.push(self.inner.remove(&mut fe, f).map_err(runtime_err)?);
        }
        to_py(py, &reports)
    }

    /// Range-query; returns the query report.
    #[pyo3(signature = (bbox, tid, cid, uid, mode="intersect", k=DEFAULT_K, bf=false))]
    #[allow(clippy::too_many_arguments)]
    fn query<'py>(
        &mut self,
        py: Python<'py>,
        bbox: (f64, f64, f64, f64),
        tid: &str,
        cid: &str,
        uid: &str,
        mode: &str,
        k: usize,
        bf: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mode: FilterMode = mode.parse().map_err(value_err)?;
        let q = RangeQuery::new(to_bbox(bbox)?, mode, tid, cid).with_k(k).with_bf(bf);
        let creds = self.user(tid, uid)?;
        let mut fe = self.inner.frontend(creds);
        let r = self.inner.query(&mut fe, &q).map_err(runtime_err)?;
        to_py(py, &r)
    }

    fn engine_ids(&self) -> Vec<String> {
        self.inner.engine_ids()
    }

    fn engine_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.engine_stats())
    }

    fn restart_engine(&mut self, id: &str) -> PyResult<()> {
        self.inner.restart_engine(id).map_err(|e| PyKeyError::new_err(e.to_string()))
    }

    fn flush_caches(&mut self) {
        self.inner.flush_caches();
    }

    /// Simulated time in ms.
    fn now_ms(&self) -> f64 {
        self.inner.net.now()
    }
}

#[pymodule]
#[pyo3(name = "tilebase")]
fn tilebase_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tile_prefix_of, m)?)?;
    m.add_function(wrap_pyfunction!(parse_name, m)?)?;
    m.add_function(wrap_pyfunction!(tessellate, m)?)?;
    m.add_function(wrap_pyfunction!(model_batch_ms, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_gtfs, m)?)?;
    m.add_class::<Cluster>()?;
    Ok(())
}
