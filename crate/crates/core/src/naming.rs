//! Hierarchical names: tile-prefixes and the DATA / TILE / IP-RES / segment
//! names built on top of them.
//!
//! Canonical text form is `ndn:/` followed by the components joined by `/`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::grid::{TileId, MAX_LEVEL};

pub const SCHEME: &str = "ndn:/";
pub const ROOT: &str = "OGB";
pub const GRID_MARKER: &str = "GPS-ID";
pub const DATA: &str = "DATA";
pub const TILE: &str = "TILE";
pub const IP_RES: &str = "IP-RES";
pub const SEGMENT_PREFIX: &str = "seg=";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NameError {
    #[error("name must start with {SCHEME}: {0:?}")]
    MissingScheme(String),
    #[error("empty or invalid component at index {0}")]
    InvalidComponent(usize),
    #[error("malformed name at component {index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error("invalid identifier {0:?}: only [A-Za-z0-9_-] allowed")]
    InvalidIdentifier(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Name {
    components: Vec<String>,
}

impl Name {
    pub fn new<I, S>(components: I) -> Result<Self, NameError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let components: Vec<String> = components.into_iter().map(Into::into).collect();
        for (i, c) in components.iter().enumerate() {
            if c.is_empty() || c.contains('/') {
                return Err(NameError::InvalidComponent(i));
            }
        }
        Ok(Name { components })
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Appends one component. Panics on an empty component or one that
    /// contains '/'; callers build components from validated parts.
    pub fn child(&self, component: impl Into<String>) -> Name {
        let c = component.into();
        assert!(!c.is_empty() && !c.contains('/'), "invalid name component {c:?}");
        let mut components = self.components.clone();
        components.push(c);
        Name { components }
    }

    pub fn join<I, S>(&self, parts: I) -> Name
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        parts.into_iter().fold(self.clone(), |n, p| n.child(p))
    }

    /// Component-wise prefix test. A name is a prefix of itself.
    pub fn is_prefix_of(&self, other: &Name) -> bool {
        self.components.len() <= other.components.len()
            && self.components.iter().zip(&other.components).all(|(a, b)| a == b)
    }

    pub fn prefix(&self, len: usize) -> Name {
        Name { components: self.components[..len.min(self.components.len())].to_vec() }
    }

    pub fn last(&self) -> Option<&str> {
        self.components.last().map(String::as_str)
    }
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(SCHEME)?;
        f.write_str(&self.components.join("/"))
    }
}

impl FromStr for Name {
    type Err = NameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s.strip_prefix(SCHEME).ok_or_else(|| NameError::MissingScheme(s.to_string()))?;
        if rest.is_empty() {
            return Ok(Name::default());
        }
        Name::new(rest.split('/'))
    }
}

impl Serialize for Name {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Name {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Checks the tid/cid/uid/oid alphabet.
pub fn validate_identifier(s: &str) -> Result<(), NameError> {
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
        Ok(())
    } else {
        Err(NameError::InvalidIdentifier(s.to_string()))
    }
}

fn tile_components(t: &TileId) -> Vec<String> {
    let mut c = vec![ROOT.to_string(), t.lng0().to_string(), t.lat0().to_string()];
    c.extend(t.digits().iter().map(|(x, y)| format!("{x}{y}")));
    c
}

/// `ndn:/OGB/lng0/lat0/<lng1 lat1>/.../GPS-ID`
pub fn tile_prefix(t: &TileId) -> Name {
    let mut c = tile_components(t);
    c.push(GRID_MARKER.to_string());
    Name { components: c }
}

/// The tile-prefix without its terminating grid marker. Routing entries are
/// keyed on this form so that a parent's entry is a component prefix of
/// every descendant's names.
pub fn routing_prefix(t: &TileId) -> Name {
    Name { components: tile_components(t) }
}

/// Converts an announced name (tile-prefix or already stripped) into the
/// form stored in forwarding tables.
pub fn routable(prefix: &Name) -> Name {
    match prefix.last() {
        Some(GRID_MARKER) => prefix.prefix(prefix.len() - 1),
        _ => prefix.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DataName {
    pub tile: TileId,
    pub tid: String,
    pub cid: String,
    pub uid: String,
    pub oid: String,
}

impl DataName {
    pub fn new(tile: TileId, tid: &str, cid: &str, uid: &str, oid: &str) -> Result<Self, NameError> {
        for id in [tid, cid, uid, oid] {
            validate_identifier(id)?;
        }
        Ok(DataName { tile, tid: tid.into(), cid: cid.into(), uid: uid.into(), oid: oid.into() })
    }

    pub fn to_name(&self) -> Name {
        tile_prefix(&self.tile).join([DATA, &self.tid, &self.cid, &self.uid, &self.oid])
    }

    /// The same object indexed under another tile.
    pub fn with_tile(&self, tile: TileId) -> DataName {
        DataName { tile, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileName {
    pub tile: TileId,
    pub tid: String,
    pub cid: String,
}

impl TileName {
    pub fn new(tile: TileId, tid: &str, cid: &str) -> Result<Self, NameError> {
        validate_identifier(tid)?;
        validate_identifier(cid)?;
        Ok(TileName { tile, tid: tid.into(), cid: cid.into() })
    }

    pub fn to_name(&self) -> Name {
        tile_prefix(&self.tile).join([TILE, &self.tid, &self.cid])
    }

    /// Leading part of every DATA name this tile query selects.
    pub fn data_prefix(&self) -> Name {
        tile_prefix(&self.tile).join([DATA, &self.tid, &self.cid])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IpResName {
    pub tile: TileId,
}

impl IpResName {
    pub fn to_name(&self) -> Name {
        tile_prefix(&self.tile).child(IP_RES)
    }
}

pub fn segment_name(base: &Name, index: u64) -> Name {
    base.child(format!("{SEGMENT_PREFIX}{index}"))
}

/// Splits a trailing `seg=<i>` component off, if present.
pub fn split_segment(name: &Name) -> Option<(Name, u64)> {
    let idx = segment_index(name.last()?)?;
    Some((name.prefix(name.len() - 1), idx))
}

fn segment_index(component: &str) -> Option<u64> {
    let digits = component.strip_prefix(SEGMENT_PREFIX)?;
    let canonical = !digits.is_empty()
        && digits.bytes().all(|b| b.is_ascii_digit())
        && (digits == "0" || !digits.starts_with('0'));
    if canonical {
        digits.parse().ok()
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedName {
    TilePrefix(TileId),
    Data(DataName),
    Tile(TileName),
    IpRes(IpResName),
    Segment { base: Name, index: u64 },
}

impl ParsedName {
    pub fn to_name(&self) -> Name {
        match self {
            ParsedName::TilePrefix(t) => tile_prefix(t),
            ParsedName::Data(d) => d.to_name(),
            ParsedName::Tile(t) => t.to_name(),
            ParsedName::IpRes(r) => r.to_name(),
            ParsedName::Segment { base, index } => segment_name(base, *index),
        }
    }
}

fn malformed(index: usize, reason: impl Into<String>) -> NameError {
    NameError::Malformed { index, reason: reason.into() }
}

fn parse_degree(c: &[String], index: usize, range: std::ops::Range<i32>) -> Result<i32, NameError> {
    let s = c.get(index).ok_or_else(|| malformed(index, "missing degree component"))?;
    let v: i32 = s.parse().map_err(|_| malformed(index, format!("not an integer degree: {s:?}")))?;
    if v.to_string() != *s || !range.contains(&v) {
        return Err(malformed(index, format!("non-canonical or out-of-range degree {s:?}")));
    }
    Ok(v)
}

/// Parses the tile-prefix at the start of `c`; returns the tile and the index
/// of the first component after the grid marker.
fn parse_tile(c: &[String]) -> Result<(TileId, usize), NameError> {
    if c.first().map(String::as_str) != Some(ROOT) {
        return Err(malformed(0, format!("expected {ROOT}")));
    }
    let lng0 = parse_degree(c, 1, -180..180)?;
    let lat0 = parse_degree(c, 2, -90..90)?;
    let mut digits = Vec::new();
    let mut i = 3;
    loop {
        let comp = c.get(i).ok_or_else(|| malformed(i, format!("missing {GRID_MARKER}")))?;
        if comp == GRID_MARKER {
            break;
        }
        let b = comp.as_bytes();
        if b.len() != 2 || !b[0].is_ascii_digit() || !b[1].is_ascii_digit() {
            return Err(malformed(i, format!("invalid digit pair {comp:?}")));
        }
        if digits.len() == MAX_LEVEL as usize {
            return Err(malformed(i, "too many grid levels"));
        }
        digits.push((b[0] - b'0', b[1] - b'0'));
        i += 1;
    }
    let tile = TileId::new(lng0, lat0, digits).map_err(|e| malformed(1, e.to_string()))?;
    Ok((tile, i + 1))
}

fn ident(c: &[String], index: usize) -> Result<&str, NameError> {
    let s = c.get(index).ok_or_else(|| malformed(index, "missing identifier"))?;
    validate_identifier(s).map_err(|_| malformed(index, format!("invalid identifier {s:?}")))?;
    Ok(s)
}

pub fn parse(name: &Name) -> Result<ParsedName, NameError> {
    if let Some((base, index)) = split_segment(name) {
        parse(&base)?;
        return Ok(ParsedName::Segment { base, index });
    }
    let c = name.components();
    let (tile, at) = parse_tile(c)?;
    let rest = &c[at..];
    let expect_len = |n: usize| -> Result<(), NameError> {
        if rest.len() == n {
            Ok(())
        } else {
            Err(malformed(at + n.min(rest.len()), "unexpected component count"))
        }
    };
    match rest.first().map(String::as_str) {
        None => Ok(ParsedName::TilePrefix(tile)),
        Some(DATA) => {
            expect_len(5)?;
            Ok(ParsedName::Data(DataName {
                tile,
                tid: ident(c, at + 1)?.into(),
                cid: ident(c, at + 2)?.into(),
                uid: ident(c, at + 3)?.into(),
                oid: ident(c, at + 4)?.into(),
            }))
        }
        Some(TILE) => {
            expect_len(3)?;
            Ok(ParsedName::Tile(TileName { tile, tid: ident(c, at + 1)?.into(), cid: ident(c, at + 2)?.into() }))
        }
        Some(IP_RES) => {
            expect_len(1)?;
            Ok(ParsedName::IpRes(IpResName { tile }))
        }
        Some(other) => Err(malformed(at, format!("unknown name type {other:?}"))),
    }
}

pub fn parse_str(text: &str) -> Result<ParsedName, NameError> {
    parse(&text.parse()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{locate, parent, GeoPoint};
    use proptest::prelude::*;

    fn starbucks_tile() -> TileId {
        locate(&GeoPoint::new(12.51133, 41.8919).unwrap(), 2).unwrap()
    }

    #[test]
    fn tile_prefix_forms() {
        assert_eq!(tile_prefix(&starbucks_tile()).to_string(), "ndn:/OGB/12/41/58/19/GPS-ID");
        assert_eq!(tile_prefix(&TileId::new(12, 41, vec![]).unwrap()).to_string(), "ndn:/OGB/12/41/GPS-ID");
        assert_eq!(tile_prefix(&TileId::new(-1, -1, vec![(5, 5)]).unwrap()).to_string(), "ndn:/OGB/-1/-1/55/GPS-ID");
    }

    #[test]
    fn parses_starbucks_data_name() {
        let parsed = parse_str("ndn:/OGB/12/41/58/19/GPS-ID/DATA/Foo/ShopApp/Alice/1234").unwrap();
        let expected = DataName::new(starbucks_tile(), "Foo", "ShopApp", "Alice", "1234").unwrap();
        assert_eq!(parsed, ParsedName::Data(expected));
    }

    #[test]
    fn parses_level0_tile_name() {
        let parsed = parse_str("ndn:/OGB/12/41/GPS-ID/TILE/Foo/ShopApp").unwrap();
        match parsed {
            ParsedName::Tile(t) => {
                assert_eq!(t.tile.level(), 0);
                assert_eq!((t.tid.as_str(), t.cid.as_str()), ("Foo", "ShopApp"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_digit_reports_component() {
        let err = parse_str("ndn:/OGB/12/41/5X/GPS-ID/TILE/Foo/ShopApp").unwrap_err();
        assert!(matches!(err, NameError::Malformed { index: 3, .. }), "{err:?}");
        assert!(matches!(parse_str("ndn:/OGB/012/41/GPS-ID"), Err(NameError::Malformed { index: 1, .. })));
        assert!(matches!(parse_str("ndn:/OGB/12/41/GPS-ID/DATA/Foo"), Err(NameError::Malformed { .. })));
        assert!(matches!(parse_str("OGB/12"), Err(NameError::MissingScheme(_))));
    }

    #[test]
    fn segment_names() {
        let tn = TileName::new(starbucks_tile(), "Foo", "ShopApp").unwrap().to_name();
        assert_eq!(segment_name(&tn, 0).to_string(), format!("{tn}/seg=0"));
        let s12 = segment_name(&tn, 12);
        assert_eq!(s12.to_string(), format!("{tn}/seg=12"));
        assert_eq!(parse(&s12).unwrap(), ParsedName::Segment { base: tn.clone(), index: 12 });
        assert!(split_segment(&tn.child("seg=012")).is_none());
    }

    #[test]
    fn routing_prefix_nests() {
        let t = starbucks_tile();
        let p1 = parent(&t).unwrap();
        assert!(routing_prefix(&p1).is_prefix_of(&routing_prefix(&t)));
        assert!(routing_prefix(&p1).is_prefix_of(&TileName::new(t.clone(), "Foo", "X").unwrap().to_name()));
        assert_eq!(routable(&tile_prefix(&p1)), routing_prefix(&p1));
    }

    fn any_tile() -> impl Strategy<Value = TileId> {
        (-180i32..180, -90i32..90, proptest::collection::vec((0u8..10, 0u8..10), 0..=2))
            .prop_map(|(x, y, d)| TileId::new(x, y, d).unwrap())
    }

    fn any_ident() -> impl Strategy<Value = String> {
        "[A-Za-z0-9_-]{1,12}".prop_map(|s| s)
    }

    fn any_parsed() -> impl Strategy<Value = ParsedName> {
        let leaf = prop_oneof![
            any_tile().prop_map(ParsedName::TilePrefix),
            (any_tile(), any_ident(), any_ident(), any_ident(), any_ident())
                .prop_map(|(t, a, b, c, d)| ParsedName::Data(DataName::new(t, &a, &b, &c, &d).unwrap())),
            (any_tile(), any_ident(), any_ident())
                .prop_map(|(t, a, b)| ParsedName::Tile(TileName::new(t, &a, &b).unwrap())),
            any_tile().prop_map(|tile| ParsedName::IpRes(IpResName { tile })),
        ];
        (leaf, proptest::option::of(0u64..100_000)).prop_map(|(p, seg)| match seg {
            Some(index) => ParsedName::Segment { base: p.to_name(), index },
            None => p,
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(p in any_parsed()) {
            let text = p.to_name().to_string();
            let name: Name = text.parse().unwrap();
            prop_assert_eq!(name.to_string(), text);
            prop_assert_eq!(parse(&name).unwrap(), p);
        }

        #[test]
        fn parent_routing_prefix_is_strict_prefix(t in any_tile()) {
            if t.level() >= 1 {
                let p = parent(&t).unwrap();
                let (a, b) = (routing_prefix(&p), routing_prefix(&t));
                prop_assert!(a.is_prefix_of(&b) && a.len() < b.len());
            }
        }
    }
}
