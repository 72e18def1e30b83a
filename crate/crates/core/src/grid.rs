//! The fixed three-level decimal grid.
//!
//! A level-0 tile covers one whole degree on each axis; every further level
//! splits a tile into 10 x 10 children, so the level ratio is 100. Tiles are
//! half-open boxes `[low, high)` on both axes, which gives every point exactly
//! one tile per level.
//!
//! Cell edges are always computed as `index / 10^level` in `f64`. Since the
//! division is correctly rounded, the edges produced for a parent and for its
//! children coincide bit for bit, and [`locate`] corrects its floor estimate
//! against those same edges so it can never disagree with [`tile_bbox`].

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Deepest grid level.
pub const MAX_LEVEL: u8 = 2;
/// Children per axis between consecutive levels.
pub const AXIS_RATIO: i64 = 10;
/// Children per tile between consecutive levels.
pub const LEVEL_RATIO: usize = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("invalid coordinate ({lng}, {lat})")]
    InvalidCoordinate { lng: f64, lat: f64 },
    #[error("invalid grid level {0}")]
    InvalidLevel(u8),
    #[error("level-0 tile has no parent")]
    NoParent,
    #[error("level-{MAX_LEVEL} tile has no children")]
    NoChildren,
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("unsupported geometry type {0}")]
    UnsupportedGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lng: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lng: f64, lat: f64) -> Result<Self, GridError> {
        let p = GeoPoint { lng, lat };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let ok = self.lng.is_finite()
            && self.lat.is_finite()
            && (-180.0..180.0).contains(&self.lng)
            && (-90.0..90.0).contains(&self.lat);
        if ok {
            Ok(())
        } else {
            Err(GridError::InvalidCoordinate { lng: self.lng, lat: self.lat })
        }
    }
}

/// Axis-aligned box in degree space. No antimeridian wrap.
///
/// As a query region the box is half-open on every axis with positive extent
/// and closed on a degenerate axis, see [`BoundingBox::contains`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: GeoPoint,
    pub max: GeoPoint,
}

impl BoundingBox {
    pub fn new(min: GeoPoint, max: GeoPoint) -> Result<Self, GridError> {
        let b = BoundingBox { min, max };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from `min_lng, min_lat, max_lng, max_lat`. The max corner
    /// may sit on the 180/90 boundary since it is an exclusive bound.
    pub fn from_coords(min_lng: f64, min_lat: f64, max_lng: f64, max_lat: f64) -> Result<Self, GridError> {
        Self::new(GeoPoint { lng: min_lng, lat: min_lat }, GeoPoint { lng: max_lng, lat: max_lat })
    }

    pub fn validate(&self) -> Result<(), GridError> {
        self.min.validate()?;
        let max_ok = self.max.lng.is_finite()
            && self.max.lat.is_finite()
            && self.max.lng <= 180.0
            && self.max.lat <= 90.0;
        if !max_ok {
            return Err(GridError::InvalidCoordinate { lng: self.max.lng, lat: self.max.lat });
        }
        if self.min.lng > self.max.lng || self.min.lat > self.max.lat {
            return Err(GridError::InvalidBox("min corner exceeds max corner".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.max.lng - self.min.lng
    }

    pub fn height(&self) -> f64 {
        self.max.lat - self.min.lat
    }

    /// Area in squared degrees.
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Query membership: `min <= p < max` on an axis with positive extent,
    /// `p == min` on a degenerate axis.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        axis_contains(self.min.lng, self.max.lng, p.lng) && axis_contains(self.min.lat, self.max.lat, p.lat)
    }

    /// Area of the intersection with `other`, zero when they only touch.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.max.lng.min(other.max.lng) - self.min.lng.max(other.min.lng);
        let h = self.max.lat.min(other.max.lat) - self.min.lat.max(other.min.lat);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// True when `other` lies inside this box (closed comparison).
    pub fn encloses(&self, other: &BoundingBox) -> bool {
        self.min.lng <= other.min.lng
            && self.min.lat <= other.min.lat
            && self.max.lng >= other.max.lng
            && self.max.lat >= other.max.lat
    }
}

fn axis_contains(lo: f64, hi: f64, v: f64) -> bool {
    if lo == hi {
        v == lo
    } else {
        lo <= v && v < hi
    }
}

/// Point or MultiPoint geometry; the only shapes the grid indexes.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Point(GeoPoint),
    MultiPoint(Vec<GeoPoint>),
}

impl Geometry {
    pub fn points(&self) -> &[GeoPoint] {
        match self {
            Geometry::Point(p) => std::slice::from_ref(p),
            Geometry::MultiPoint(ps) => ps,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Geometry::Point(_) => "Point",
            Geometry::MultiPoint(_) => "MultiPoint",
        }
    }
}

/// A grid cell. `digits[i]` holds the (longitude, latitude) decimal digits
/// for level `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId {
    level: u8,
    lng0: i32,
    lat0: i32,
    digits: Vec<(u8, u8)>,
}

impl TileId {
    pub fn new(lng0: i32, lat0: i32, digits: Vec<(u8, u8)>) -> Result<Self, GridError> {
        if digits.len() > MAX_LEVEL as usize {
            return Err(GridError::InvalidLevel(digits.len() as u8));
        }
        if digits.iter().any(|&(a, b)| a > 9 || b > 9) {
            return Err(GridError::InvalidBox("tile digit out of range".into()));
        }
        if !(-180..180).contains(&lng0) || !(-90..90).contains(&lat0) {
            return Err(GridError::InvalidCoordinate { lng: lng0 as f64, lat: lat0 as f64 });
        }
        Ok(TileId { level: digits.len() as u8, lng0, lat0, digits })
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn lng0(&self) -> i32 {
        self.lng0
    }

    pub fn lat0(&self) -> i32 {
        self.lat0
    }

    pub fn digits(&self) -> &[(u8, u8)] {
        &self.digits
    }

    /// Absolute cell indices at this tile's level: `floor(coord * 10^level)`.
    pub fn indices(&self) -> (i64, i64) {
        let mut ix = self.lng0 as i64;
        let mut iy = self.lat0 as i64;
        for &(dx, dy) in &self.digits {
            ix = ix * AXIS_RATIO + dx as i64;
            iy = iy * AXIS_RATIO + dy as i64;
        }
        (ix, iy)
    }

    /// Inverse of [`TileId::indices`].
    pub fn from_indices(level: u8, ix: i64, iy: i64) -> Result<Self, GridError> {
        if level > MAX_LEVEL {
            return Err(GridError::InvalidLevel(level));
        }
        let scale = scale(level);
        let lng0 = ix.div_euclid(scale);
        let lat0 = iy.div_euclid(scale);
        let (mut rx, mut ry) = (ix.rem_euclid(scale), iy.rem_euclid(scale));
        let mut digits = vec![(0u8, 0u8); level as usize];
        for slot in digits.iter_mut().rev() {
            *slot = ((rx % AXIS_RATIO) as u8, (ry % AXIS_RATIO) as u8);
            rx /= AXIS_RATIO;
            ry /= AXIS_RATIO;
        }
        TileId::new(lng0 as i32, lat0 as i32, digits)
    }
}

impl fmt::Display for TileId {
    /// Decimal form used in prose, e.g. `(12.51,41.89)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (ix, iy) = self.indices();
        let s = scale(self.level);
        write!(f, "({},{})", decimal(ix, s, self.level), decimal(iy, s, self.level))
    }
}

fn decimal(index: i64, scale: i64, level: u8) -> String {
    let whole = index.div_euclid(scale);
    if level == 0 {
        return whole.to_string();
    }
    let frac = index.rem_euclid(scale);
    format!("{whole}.{frac:0width$}", width = level as usize)
}

pub(crate) fn scale(level: u8) -> i64 {
    AXIS_RATIO.pow(level as u32)
}

/// Lower edge of cell `index` on an axis whose cells are `size / scale` wide.
pub(crate) fn cell_edge(index: i64, size: f64, scale: i64) -> f64 {
    index as f64 * size / scale as f64
}

/// Index of the half-open cell containing `coord`, consistent with [`cell_edge`].
pub(crate) fn cell_index(coord: f64, size: f64, scale: i64) -> i64 {
    let mut c = (coord * scale as f64 / size).floor() as i64;
    while cell_edge(c, size, scale) > coord {
        c -= 1;
    }
    while cell_edge(c + 1, size, scale) <= coord {
        c += 1;
    }
    c
}

pub fn locate(p: &GeoPoint, level: u8) -> Result<TileId, GridError> {
    p.validate()?;
    if level > MAX_LEVEL {
        return Err(GridError::InvalidLevel(level));
    }
    let s = scale(level);
    TileId::from_indices(level, cell_index(p.lng, 1.0, s), cell_index(p.lat, 1.0, s))
}

pub fn parent(t: &TileId) -> Result<TileId, GridError> {
    if t.level == 0 {
        return Err(GridError::NoParent);
    }
    let mut digits = t.digits.clone();
    digits.pop();
    Ok(TileId { level: t.level - 1, lng0: t.lng0, lat0: t.lat0, digits })
}

/// Ancestor at `level` (the tile itself when `level` equals its level).
pub fn ancestor(t: &TileId, level: u8) -> Result<TileId, GridError> {
    if level > t.level {
        return Err(GridError::InvalidLevel(level));
    }
    Ok(TileId {
        level,
        lng0: t.lng0,
        lat0: t.lat0,
        digits: t.digits[..level as usize].to_vec(),
    })
}

/// The 100 children, ordered by longitude digit then latitude digit.
pub fn children(t: &TileId) -> Result<Vec<TileId>, GridError> {
    if t.level >= MAX_LEVEL {
        return Err(GridError::NoChildren);
    }
    let mut out = Vec::with_capacity(LEVEL_RATIO);
    for dx in 0..10u8 {
        for dy in 0..10u8 {
            let mut digits = t.digits.clone();
            digits.push((dx, dy));
            out.push(TileId { level: t.level + 1, lng0: t.lng0, lat0: t.lat0, digits });
        }
    }
    Ok(out)
}

pub fn tile_bbox(t: &TileId) -> BoundingBox {
    let s = scale(t.level);
    let (ix, iy) = t.indices();
    BoundingBox {
        min: GeoPoint { lng: cell_edge(ix, 1.0, s), lat: cell_edge(iy, 1.0, s) },
        max: GeoPoint { lng: cell_edge(ix + 1, 1.0, s), lat: cell_edge(iy + 1, 1.0, s) },
    }
}

/// Half-open containment of `p` in tile `t`.
pub fn tile_contains(t: &TileId, p: &GeoPoint) -> bool {
    let b = tile_bbox(t);
    b.min.lng <= p.lng && p.lng < b.max.lng && b.min.lat <= p.lat && p.lat < b.max.lat
}

pub fn intersected_tiles(g: &Geometry, level: u8) -> Result<BTreeSet<TileId>, GridError> {
    g.points().iter().map(|p| locate(p, level)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lng: f64, lat: f64) -> GeoPoint {
        GeoPoint::new(lng, lat).unwrap()
    }

    #[test]
    fn starbucks_locates_to_level2_tile() {
        let t = locate(&pt(12.51133, 41.8919), 2).unwrap();
        assert_eq!(t, TileId::new(12, 41, vec![(5, 8), (1, 9)]).unwrap());
        assert_eq!(t.to_string(), "(12.51,41.89)");
    }

    #[test]
    fn origin_and_negative_floor() {
        assert_eq!(locate(&pt(0.0, 0.0), 0).unwrap(), TileId::new(0, 0, vec![]).unwrap());
        assert_eq!(locate(&pt(-0.5, -0.5), 1).unwrap(), TileId::new(-1, -1, vec![(5, 5)]).unwrap());
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(locate(&GeoPoint { lng: 180.0, lat: 0.0 }, 0), Err(GridError::InvalidCoordinate { .. })));
        assert!(matches!(locate(&GeoPoint { lng: 0.0, lat: 90.0 }, 0), Err(GridError::InvalidCoordinate { .. })));
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn parent_chain() {
        let t = locate(&pt(12.51133, 41.8919), 2).unwrap();
        let p1 = parent(&t).unwrap();
        assert_eq!(p1.to_string(), "(12.5,41.8)");
        let p0 = parent(&p1).unwrap();
        assert_eq!(p0.to_string(), "(12,41)");
        assert_eq!(parent(&p0), Err(GridError::NoParent));
    }

    #[test]
    fn children_cover_parent() {
        let t = TileId::new(12, 41, vec![]).unwrap();
        let kids = children(&t).unwrap();
        assert_eq!(kids.len(), 100);
        assert!(kids.contains(&TileId::new(12, 41, vec![(5, 8)]).unwrap()));
        let area: f64 = kids.iter().map(|k| tile_bbox(k).area()).sum();
        assert!((area - 1.0).abs() < 1e-9);
        assert_eq!(children(&locate(&pt(1.0, 1.0), 2).unwrap()), Err(GridError::NoChildren));
    }

    #[test]
    fn bbox_definition() {
        let b = tile_bbox(&TileId::new(12, 41, vec![]).unwrap());
        assert_eq!((b.min.lng, b.min.lat, b.max.lng, b.max.lat), (12.0, 41.0, 13.0, 42.0));
        let b = tile_bbox(&TileId::new(12, 41, vec![(5, 8), (1, 9)]).unwrap());
        assert_eq!((b.min.lng, b.min.lat, b.max.lng, b.max.lat), (12.51, 41.89, 12.52, 41.9));
        let b1 = tile_bbox(&TileId::new(3, 3, vec![(2, 2)]).unwrap());
        assert!((b1.width() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn intersected_tiles_dedup() {
        let g = Geometry::Point(pt(12.51133, 41.8919));
        let set = intersected_tiles(&g, 2).unwrap();
        assert_eq!(set.into_iter().next().unwrap().to_string(), "(12.51,41.89)");
        let g = Geometry::MultiPoint(vec![pt(12.1, 41.1), pt(12.9, 41.9)]);
        assert_eq!(intersected_tiles(&g, 0).unwrap().len(), 1);
        let g = Geometry::MultiPoint(vec![pt(12.005, 41.005), pt(12.025, 41.005), pt(12.045, 41.005)]);
        assert_eq!(intersected_tiles(&g, 2).unwrap().len(), 3);
    }

    #[test]
    fn exact_edges_belong_to_upper_tile() {
        // 12.51 as a double is the value of the tile edge 1251/100.
        let t = locate(&pt(12.51, 41.89), 2).unwrap();
        assert_eq!(t.indices(), (1251, 4189));
        let t = locate(&pt(0.3, -0.3), 1).unwrap();
        assert_eq!(t.indices(), (3, -3));
    }

    #[test]
    fn random_children_union_matches_parent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = pt(rng.gen_range(-180.0..180.0), rng.gen_range(-90.0..90.0));
            let t = locate(&p, rng.gen_range(0..2)).unwrap();
            let b = tile_bbox(&t);
            let kids = children(&t).unwrap();
            let mut lo = (f64::MAX, f64::MAX);
            let mut hi = (f64::MIN, f64::MIN);
            for k in &kids {
                let kb = tile_bbox(k);
                assert!(b.encloses(&kb));
                lo = (lo.0.min(kb.min.lng), lo.1.min(kb.min.lat));
                hi = (hi.0.max(kb.max.lng), hi.1.max(kb.max.lat));
            }
            assert_eq!(lo, (b.min.lng, b.min.lat));
            assert_eq!(hi, (b.max.lng, b.max.lat));
            let area: f64 = kids.iter().map(|k| tile_bbox(k).area()).sum();
            assert!((area - b.area()).abs() < 1e-9 * b.area().max(1e-6));
        }
    }

    fn any_point() -> impl Strategy<Value = GeoPoint> {
        (-180.0f64..180.0, -90.0f64..90.0).prop_map(|(lng, lat)| GeoPoint { lng, lat })
    }

    proptest! {
        #[test]
        fn locate_round_trip_and_hierarchy(p in any_point(), level in 0u8..=2) {
            let t = locate(&p, level).unwrap();
            prop_assert!(tile_contains(&t, &p));
            if level >= 1 {
                prop_assert_eq!(parent(&t).unwrap(), locate(&p, level - 1).unwrap());
            }
            let (ix, iy) = t.indices();
            prop_assert_eq!(TileId::from_indices(level, ix, iy).unwrap(), t);
        }

        #[test]
        fn distinct_tiles_are_disjoint(p in any_point(), q in any_point(), level in 0u8..=2) {
            let a = locate(&p, level).unwrap();
            let b = locate(&q, level).unwrap();
            if a != b {
                prop_assert_eq!(tile_bbox(&a).intersection_area(&tile_bbox(&b)), 0.0);
                prop_assert!(!tile_contains(&a, &q) && !tile_contains(&b, &p));
            }
        }
    }
}
