//! GeoJSON features and their per-tile wrappers.
//!
//! A feature is indexed under every tile it intersects at every grid level.
//! The entry under its canonical tile (the lexicographically smallest level-2
//! tile-prefix) carries the feature inline; every other entry is a reference
//! to that canonical name.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::grid::{intersected_tiles, BoundingBox, GeoPoint, Geometry, GridError, TileId, MAX_LEVEL};
use crate::icn::packet::ContentObject;
use crate::naming::{parse, tile_prefix, validate_identifier, DataName, Name, NameError, ParsedName, TileName};
use crate::trust::{Credentials, TrustEnvelope};

pub const MANDATORY: [&str; 4] = ["oid", "tid", "uid", "cid"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeoError {
    #[error("invalid GeoJSON: {0}")]
    Json(String),
    #[error("validation error: {0} missing")]
    MissingProperty(&'static str),
    #[error("validation error: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Name(#[from] NameError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoFeature {
    pub geometry: Geometry,
    pub properties: Map<String, Value>,
}

fn property_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_position(v: &Value) -> Result<GeoPoint, GeoError> {
    let arr = v.as_array().ok_or_else(|| GeoError::Json("position must be an array".into()))?;
    let coord = |i: usize| arr.get(i).and_then(Value::as_f64).ok_or_else(|| GeoError::Json("position needs two numbers".into()));
    Ok(GeoPoint::new(coord(0)?, coord(1)?)?)
}

fn parse_geometry(v: &Value) -> Result<Geometry, GeoError> {
    let kind = v.get("type").and_then(Value::as_str).ok_or_else(|| GeoError::Json("geometry.type missing".into()))?;
    let coords = v.get("coordinates").ok_or_else(|| GeoError::Json("geometry.coordinates missing".into()))?;
    match kind {
        "Point" => Ok(Geometry::Point(parse_position(coords)?)),
        "MultiPoint" => {
            let arr = coords.as_array().ok_or_else(|| GeoError::Json("MultiPoint coordinates must be an array".into()))?;
            if arr.is_empty() {
                return Err(GeoError::Invalid("MultiPoint without positions".into()));
            }
            Ok(Geometry::MultiPoint(arr.iter().map(parse_position).collect::<Result<_, _>>()?))
        }
        other => Err(GridError::UnsupportedGeometry(other.to_string()).into()),
    }
}

fn geometry_json(g: &Geometry) -> Value {
    let pos = |p: &GeoPoint| serde_json::json!([p.lng, p.lat]);
    match g {
        Geometry::Point(p) => serde_json::json!({"type": "Point", "coordinates": pos(p)}),
        Geometry::MultiPoint(ps) => serde_json::json!({"type": "MultiPoint", "coordinates": ps.iter().map(pos).collect::<Vec<_>>()}),
    }
}

impl GeoFeature {
    pub fn new(geometry: Geometry, properties: Map<String, Value>) -> Result<Self, GeoError> {
        let f = GeoFeature { geometry, properties };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if self.geometry.points().is_empty() {
            return Err(GeoError::Invalid("geometry has no positions".into()));
        }
        for p in self.geometry.points() {
            p.validate()?;
        }
        for key in MANDATORY {
            let text = self.properties.get(key).and_then(property_text).ok_or(GeoError::MissingProperty(key))?;
            validate_identifier(&text)?;
        }
        Ok(())
    }

    fn mandatory(&self, key: &str) -> String {
        self.properties.get(key).and_then(property_text).unwrap_or_default()
    }

    pub fn oid(&self) -> String {
        self.mandatory("oid")
    }

    pub fn tid(&self) -> String {
        self.mandatory("tid")
    }

    pub fn uid(&self) -> String {
        self.mandatory("uid")
    }

    pub fn cid(&self) -> String {
        self.mandatory("cid")
    }

    pub fn points(&self) -> &[GeoPoint] {
        self.geometry.points()
    }

    pub fn from_value(v: &Value) -> Result<Self, GeoError> {
        if v.get("type").and_then(Value::as_str) != Some("Feature") {
            return Err(GeoError::Json("expected an object with \"type\": \"Feature\"".into()));
        }
        let geometry = parse_geometry(v.get("geometry").ok_or_else(|| GeoError::Json("geometry missing".into()))?)?;
        let properties = match v.get("properties") {
            Some(Value::Object(m)) => m.clone(),
            _ => return Err(GeoError::Json("properties must be an object".into())),
        };
        GeoFeature::new(geometry, properties)
    }

    pub fn to_value(&self) -> Value {
        serde_json::json!({
            "type": "Feature",
            "geometry": geometry_json(&self.geometry),
            "properties": Value::Object(self.properties.clone()),
        })
    }

    /// Name of this feature's entry under `tile`.
    pub fn data_name(&self, tile: TileId) -> Result<DataName, GeoError> {
        Ok(DataName::new(tile, &self.tid(), &self.cid(), &self.uid(), &self.oid())?)
    }
}

pub fn parse_feature(text: &[u8]) -> Result<GeoFeature, GeoError> {
    let v: Value = serde_json::from_slice(text).map_err(|e| GeoError::Json(e.to_string()))?;
    GeoFeature::from_value(&v)
}

/// Reads a Feature, a FeatureCollection or a JSON array of Features.
pub fn parse_features(text: &[u8]) -> Result<Vec<GeoFeature>, GeoError> {
    let v: Value = serde_json::from_slice(text).map_err(|e| GeoError::Json(e.to_string()))?;
    let list = match &v {
        Value::Array(items) => items.as_slice(),
        Value::Object(o) if o.get("type").and_then(Value::as_str) == Some("FeatureCollection") => match o.get("features") {
            Some(Value::Array(items)) => items.as_slice(),
            _ => return Err(GeoError::Json("FeatureCollection without a features array".into())),
        },
        _ => std::slice::from_ref(&v),
    };
    list.iter()
        .enumerate()
        .map(|(i, f)| GeoFeature::from_value(f).map_err(|e| if list.len() > 1 { GeoError::Invalid(format!("feature {i}: {e}")) } else { e }))
        .collect()
}

pub fn canonical_tile(f: &GeoFeature) -> TileId {
    intersected_tiles(&f.geometry, MAX_LEVEL)
        .expect("validated feature")
        .into_iter()
        .min_by_key(|t| tile_prefix(t).to_string())
        .expect("feature has at least one point")
}

#[derive(Debug, Clone, PartialEq)]
pub enum OgbBody {
    Inline(GeoFeature),
    Reference(DataName),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OgbData {
    pub name: DataName,
    pub body: OgbBody,
    pub freshness_ms: u64,
    pub signature: Option<TrustEnvelope>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    name: Name,
    #[serde(rename = "bodyType")]
    body_type: String,
    body: Value,
    #[serde(rename = "freshnessMs")]
    freshness_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    signature: Option<TrustEnvelope>,
}

fn data_name_of(n: &Name) -> Result<DataName, GeoError> {
    match parse(n)? {
        ParsedName::Data(d) => Ok(d),
        _ => Err(GeoError::Invalid(format!("{n} is not a DATA name"))),
    }
}

impl OgbData {
    pub fn is_inline(&self) -> bool {
        matches!(self.body, OgbBody::Inline(_))
    }

    fn envelope(&self, with_signature: bool) -> Envelope {
        let (body_type, body) = match &self.body {
            OgbBody::Inline(f) => ("inline", f.to_value()),
            OgbBody::Reference(d) => ("reference", Value::String(d.to_name().to_string())),
        };
        Envelope {
            name: self.name.to_name(),
            body_type: body_type.into(),
            body,
            freshness_ms: self.freshness_ms,
            signature: if with_signature { self.signature.clone() } else { None },
        }
    }

    /// Signed bytes; also the payload of the DATA content object.
    pub fn payload(&self) -> Vec<u8> {
        serde_json::to_vec(&self.envelope(false)).expect("envelope serializes")
    }

    fn from_envelope(e: Envelope) -> Result<Self, GeoError> {
        let name = data_name_of(&e.name)?;
        let body = match e.body_type.as_str() {
            "inline" => OgbBody::Inline(GeoFeature::from_value(&e.body)?),
            "reference" => {
                let text = e.body.as_str().ok_or_else(|| GeoError::Json("reference body must be a name".into()))?;
                OgbBody::Reference(data_name_of(&text.parse()?)?)
            }
            other => return Err(GeoError::Json(format!("unknown bodyType {other:?}"))),
        };
        Ok(OgbData { name, body, freshness_ms: e.freshness_ms, signature: e.signature })
    }

    pub fn decode_payload(payload: &[u8], signature: Option<TrustEnvelope>) -> Result<Self, GeoError> {
        let e: Envelope = serde_json::from_slice(payload).map_err(|e| GeoError::Json(e.to_string()))?;
        let mut d = Self::from_envelope(e)?;
        d.signature = signature;
        Ok(d)
    }

    pub fn sign(&mut self, creds: &Credentials) {
        self.signature = Some(creds.sign(&self.name.to_name(), &self.payload()));
    }

    pub fn to_content(&self) -> ContentObject {
        ContentObject {
            name: self.name.to_name(),
            payload: self.payload(),
            freshness_ms: self.freshness_ms,
            signature: self.signature.clone(),
            final_segment: None,
        }
    }

    pub fn from_content(co: &ContentObject) -> Result<Self, GeoError> {
        let d = Self::decode_payload(&co.payload, co.signature.clone())?;
        if d.name.to_name() != co.name {
            return Err(GeoError::Invalid(format!("envelope name {} differs from content name {}", d.name.to_name(), co.name)));
        }
        Ok(d)
    }
}

/// Builds the full set of entries for `f`: one per intersected tile at each
/// level, inline at the canonical tile and references elsewhere.
pub fn make_ogb_data_set(f: &GeoFeature, freshness_ms: u64) -> Result<Vec<OgbData>, GeoError> {
    f.validate()?;
    let canonical = f.data_name(canonical_tile(f))?;
    let mut out = Vec::new();
    for level in 0..=MAX_LEVEL {
        for tile in intersected_tiles(&f.geometry, level)? {
            let name = f.data_name(tile)?;
            let body = if name == canonical { OgbBody::Inline(f.clone()) } else { OgbBody::Reference(canonical.clone()) };
            out.push(OgbData { name, body, freshness_ms, signature: None });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OgbTile {
    pub name: TileName,
    pub items: Vec<OgbData>,
    pub freshness_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct TileWire {
    name: Name,
    #[serde(rename = "freshnessMs")]
    freshness_ms: u64,
    items: Vec<Envelope>,
}

impl OgbTile {
    pub fn check_invariants(&self) -> Result<(), GeoError> {
        for item in &self.items {
            if item.name.tile != self.name.tile || item.name.tid != self.name.tid || item.name.cid != self.name.cid {
                return Err(GeoError::Invalid(format!("item {} does not belong to {}", item.name.to_name(), self.name.to_name())));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let wire = TileWire {
            name: self.name.to_name(),
            freshness_ms: self.freshness_ms,
            items: self.items.iter().map(|d| d.envelope(true)).collect(),
        };
        serde_json::to_vec(&wire).expect("tile serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GeoError> {
        let wire: TileWire = serde_json::from_slice(bytes).map_err(|e| GeoError::Json(e.to_string()))?;
        let name = match parse(&wire.name)? {
            ParsedName::Tile(t) => t,
            _ => return Err(GeoError::Invalid(format!("{} is not a TILE name", wire.name))),
        };
        let items = wire.items.into_iter().map(OgbData::from_envelope).collect::<Result<_, _>>()?;
        let tile = OgbTile { name, items, freshness_ms: wire.freshness_ms };
        tile.check_invariants()?;
        Ok(tile)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    Intersect,
    Include,
}

impl std::str::FromStr for FilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intersect" => Ok(FilterMode::Intersect),
            "include" => Ok(FilterMode::Include),
            other => Err(format!("unknown mode {other:?} (expected intersect or include)")),
        }
    }
}

pub fn matches(f: &GeoFeature, bbox: &BoundingBox, mode: FilterMode) -> bool {
    let mut pts = f.points().iter();
    match mode {
        FilterMode::Intersect => pts.any(|p| bbox.contains(p)),
        FilterMode::Include => pts.all(|p| bbox.contains(p)),
    }
}

/// Keeps features matching `bbox` under `mode`, first occurrence per
/// (tid, cid, oid), in input order.
pub fn post_filter(items: Vec<GeoFeature>, bbox: &BoundingBox, mode: FilterMode) -> Vec<GeoFeature> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|f| matches(f, bbox, mode))
        .filter(|f| seen.insert((f.tid(), f.cid(), f.oid())))
        .collect()
}

/// Sample documents used by examples and tests.
pub mod fixtures {
    /// A coffee shop in Rome, owned by user Alice of tenant Foo.
    pub const STARBUCKS: &str = r#"{"type": "Feature",
        "geometry": {"type": "Point","coordinates": [12.51133, 41.8919]},
        "properties": {"oid" : 1234, "tid" : "Foo", "uid": "Alice", "cid": "ShopApp", "shop-name": "Starbucks", "shop-type" : "coffeehouse" }}"#;
}

#[cfg(test)]
mod tests {
    use super::fixtures::STARBUCKS;
    use super::*;
    use crate::grid::parent;
    use proptest::prelude::*;

    fn multipoint(points: &[(f64, f64)], oid: &str) -> GeoFeature {
        let v = serde_json::json!({
            "type": "Feature",
            "geometry": {"type": "MultiPoint", "coordinates": points.iter().map(|(a, b)| vec![*a, *b]).collect::<Vec<_>>()},
            "properties": {"oid": oid, "tid": "Foo", "uid": "Alice", "cid": "ShopApp"}
        });
        GeoFeature::from_value(&v).unwrap()
    }

    proptest! {
        // Signatures cover the encoded payload, so decoding must not move a coordinate by even one ulp.
        #[test]
        fn payload_survives_decode(pts in prop::collection::vec((-180.0f64..180.0, -90.0f64..90.0), 1..6)) {
            let f = multipoint(&pts, "p");
            let d = OgbData { name: f.data_name(canonical_tile(&f)).unwrap(), body: OgbBody::Inline(f), freshness_ms: 1, signature: None };
            let bytes = d.payload();
            let back = OgbData::decode_payload(&bytes, None).unwrap();
            prop_assert_eq!(back.payload(), bytes);
        }
    }

    #[test]
    fn feature_lists() {
        let one = parse_features(STARBUCKS.as_bytes()).unwrap();
        assert_eq!(one.len(), 1);
        let coll = format!(r#"{{"type": "FeatureCollection", "features": [{STARBUCKS}, {STARBUCKS}]}}"#);
        assert_eq!(parse_features(coll.as_bytes()).unwrap().len(), 2);
        let arr = format!("[{STARBUCKS}]");
        assert_eq!(parse_features(arr.as_bytes()).unwrap(), one);
        let bad = format!(r#"[{STARBUCKS}, {{"type": "Feature"}}]"#);
        assert!(matches!(parse_features(bad.as_bytes()), Err(GeoError::Invalid(m)) if m.starts_with("feature 1")));
    }

    #[test]
    fn parses_starbucks() {
        let f = parse_feature(STARBUCKS.as_bytes()).unwrap();
        assert_eq!(f.geometry, Geometry::Point(GeoPoint { lng: 12.51133, lat: 41.8919 }));
        assert_eq!((f.oid(), f.tid(), f.uid(), f.cid()), ("1234".into(), "Foo".into(), "Alice".into(), "ShopApp".into()));
        assert_eq!(f.properties["shop-name"], "Starbucks");
        let keys: Vec<&String> = f.properties.keys().collect();
        assert_eq!(keys, ["oid", "tid", "uid", "cid", "shop-name", "shop-type"]);
    }

    #[test]
    fn missing_uid_named() {
        let text = STARBUCKS.replace(r#""uid": "Alice","#, "");
        assert_eq!(parse_feature(text.as_bytes()), Err(GeoError::MissingProperty("uid")));
    }

    #[test]
    fn polygon_unsupported() {
        let text = r#"{"type":"Feature","geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]},
            "properties":{"oid":"1","tid":"T","uid":"U","cid":"C"}}"#;
        assert_eq!(parse_feature(text.as_bytes()), Err(GeoError::Grid(GridError::UnsupportedGeometry("Polygon".into()))));
    }

    #[test]
    fn canonical_tile_rules() {
        let f = parse_feature(STARBUCKS.as_bytes()).unwrap();
        assert_eq!(canonical_tile(&f).to_string(), "(12.51,41.89)");
        // Prefixes .../58/19/... and .../58/20/...: the "/19" tile wins.
        let mp = multipoint(&[(12.525, 41.805), (12.515, 41.895)], "m");
        let ct = canonical_tile(&mp);
        assert_eq!(tile_prefix(&ct).to_string(), "ndn:/OGB/12/41/58/19/GPS-ID");
    }

    #[test]
    fn starbucks_data_set() {
        let f = parse_feature(STARBUCKS.as_bytes()).unwrap();
        let set = make_ogb_data_set(&f, 1000).unwrap();
        assert_eq!(set.len(), 3);
        let inline: Vec<_> = set.iter().filter(|d| d.is_inline()).collect();
        assert_eq!(inline.len(), 1);
        assert_eq!(inline[0].name.to_name().to_string(), "ndn:/OGB/12/41/58/19/GPS-ID/DATA/Foo/ShopApp/Alice/1234");
        let canonical = inline[0].name.clone();
        let l2 = canonical.tile.clone();
        let tiles: Vec<TileId> = set.iter().map(|d| d.name.tile.clone()).collect();
        assert!(tiles.contains(&parent(&l2).unwrap()));
        assert!(tiles.contains(&parent(&parent(&l2).unwrap()).unwrap()));
        for d in set.iter().filter(|d| !d.is_inline()) {
            assert_eq!(d.body, OgbBody::Reference(canonical.clone()));
        }
    }

    #[test]
    fn multipoint_data_set_sizes() {
        let same = multipoint(&[(12.5111, 41.8911), (12.5112, 41.8912)], "a");
        assert_eq!(make_ogb_data_set(&same, 0).unwrap().len(), 3);
        let apart = multipoint(&[(12.5, 41.5), (13.5, 41.5)], "b");
        let set = make_ogb_data_set(&apart, 0).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set.iter().filter(|d| d.is_inline()).count(), 1);
    }

    #[test]
    fn envelope_round_trip_preserves_properties() {
        let f = parse_feature(STARBUCKS.as_bytes()).unwrap();
        for d in make_ogb_data_set(&f, 42).unwrap() {
            let co = d.to_content();
            let back = OgbData::from_content(&co).unwrap();
            assert_eq!(back, d);
            assert_eq!(back.payload(), co.payload);
        }
        let tile_name = TileName::new(canonical_tile(&f), "Foo", "ShopApp").unwrap();
        let items: Vec<OgbData> = make_ogb_data_set(&f, 42).unwrap().into_iter().filter(|d| d.is_inline()).collect();
        let tile = OgbTile { name: tile_name, items, freshness_ms: 7 };
        assert_eq!(OgbTile::decode(&tile.encode()).unwrap(), tile);
    }

    #[test]
    fn post_filter_modes() {
        let bbox = BoundingBox::from_coords(12.0, 41.0, 12.5, 41.5).unwrap();
        let cut = multipoint(&[(12.2, 41.2), (12.7, 41.2)], "cut");
        let inside = multipoint(&[(12.2, 41.2)], "in");
        assert_eq!(post_filter(vec![cut.clone()], &bbox, FilterMode::Intersect).len(), 1);
        assert!(post_filter(vec![cut.clone()], &bbox, FilterMode::Include).is_empty());
        assert_eq!(post_filter(vec![inside.clone()], &bbox, FilterMode::Include).len(), 1);
        assert_eq!(post_filter(vec![inside.clone()], &bbox, FilterMode::Intersect).len(), 1);
        // Same feature reaching the handler from two tiles.
        let out = post_filter(vec![cut.clone(), inside.clone(), cut.clone()], &bbox, FilterMode::Intersect);
        assert_eq!(out.iter().map(GeoFeature::oid).collect::<Vec<_>>(), ["cut", "in"]);
    }

    #[test]
    fn include_subset_of_intersect() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let feats: Vec<GeoFeature> = (0..200)
            .map(|i| {
                let pts: Vec<(f64, f64)> = (0..rng.gen_range(1..4)).map(|_| (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0))).collect();
                multipoint(&pts, &i.to_string())
            })
            .collect();
        for _ in 0..20 {
            let (x, y) = (rng.gen_range(0.0..1.5), rng.gen_range(0.0..1.5));
            let bbox = BoundingBox::from_coords(x, y, x + 0.5, y + 0.5).unwrap();
            let inter: HashSet<String> = post_filter(feats.clone(), &bbox, FilterMode::Intersect).iter().map(GeoFeature::oid).collect();
            let incl: HashSet<String> = post_filter(feats.clone(), &bbox, FilterMode::Include).iter().map(GeoFeature::oid).collect();
            assert!(incl.is_subset(&inter));
        }
    }
}
