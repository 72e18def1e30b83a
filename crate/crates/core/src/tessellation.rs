//! Covering a query box with a bounded number of grid tiles.
//!
//! Three covers are provided:
//!
//! * [`min_stretch`]: every deepest-level tile overlapping the box.
//! * [`mst_reduce`] / [`mst`]: the same area with every complete sibling set
//!   replaced by its parent, recursively.
//! * [`constrained`]: the greedy top-down cover with at most `k` tiles.
//!
//! A tile overlaps the box when the intersection has positive area. On a
//! degenerate axis (zero extent) the tile containing the coordinate counts
//! as overlapping, so zero-area boxes still get a cover.
//!
//! The greedy works on the reduced indexing tree. Level `i` needs an
//! aggregation when the tiles already fixed at levels `<= i` plus the live
//! level-`(i+1)` nodes exceed `k`: even collapsing everything below `i + 1`
//! could not meet the bound. The aggregation picked is the level-`i` node with
//! the smallest tile-stretch among those with at least two live children,
//! ties broken by the smallest tile-prefix.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::grid::{cell_edge, cell_index, BoundingBox, GeoPoint, TileId};
use crate::naming::tile_prefix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TessellationError {
    #[error("query box lies outside the grid extent")]
    OutOfExtent,
    #[error("tile constraint k must be at least 1")]
    InvalidConstraint,
    #[error("tile does not overlap the query area; stretch undefined")]
    UndefinedStretch,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid query box: {0}")]
    InvalidBox(String),
}

/// A tile of an [`AbstractGrid`], addressed by absolute indices at its level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub level: u8,
    pub ix: i64,
    pub iy: i64,
}

impl Cell {
    pub fn parent(&self, side: i64) -> Option<Cell> {
        (self.level > 0).then(|| Cell { level: self.level - 1, ix: self.ix.div_euclid(side), iy: self.iy.div_euclid(side) })
    }
}

/// Hierarchical square grid: `levels` levels, each tile split into
/// `side * side` children, level-0 tiles `root_size` wide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractGrid {
    levels: u8,
    side: i64,
    root_size: f64,
    extent: BoundingBox,
    ogb: bool,
}

impl AbstractGrid {
    pub fn new(levels: u8, ratio: u32, root_size: f64, extent: BoundingBox) -> Result<Self, TessellationError> {
        let side = (ratio as f64).sqrt().round() as i64;
        if ratio < 4 || (side * side) as u32 != ratio {
            return Err(TessellationError::InvalidGrid(format!("ratio {ratio} is not a perfect square >= 4")));
        }
        if levels == 0 || levels > 8 {
            return Err(TessellationError::InvalidGrid(format!("{levels} levels")));
        }
        if !(root_size > 0.0) || extent.area() <= 0.0 {
            return Err(TessellationError::InvalidGrid("empty extent".into()));
        }
        Ok(AbstractGrid { levels, side, root_size, extent, ogb: false })
    }

    /// The production grid: three levels, ratio 100, one-degree roots.
    pub fn ogb() -> Self {
        AbstractGrid {
            levels: 3,
            side: 10,
            root_size: 1.0,
            extent: BoundingBox { min: GeoPoint { lng: -180.0, lat: -90.0 }, max: GeoPoint { lng: 180.0, lat: 90.0 } },
            ogb: true,
        }
    }

    /// Three-level ratio-4 grid of `nx * ny` unit roots anchored at the origin.
    pub fn ratio4(nx: u32, ny: u32) -> Self {
        let extent = BoundingBox { min: GeoPoint { lng: 0.0, lat: 0.0 }, max: GeoPoint { lng: nx as f64, lat: ny as f64 } };
        AbstractGrid::new(3, 4, 1.0, extent).expect("valid demo grid")
    }

    pub fn extent(&self) -> &BoundingBox {
        &self.extent
    }

    pub fn deepest(&self) -> u8 {
        self.levels - 1
    }

    pub fn side(&self) -> i64 {
        self.side
    }

    pub fn ratio(&self) -> usize {
        (self.side * self.side) as usize
    }

    fn scale(&self, level: u8) -> i64 {
        self.side.pow(level as u32)
    }

    pub fn edge(&self, level: u8, index: i64) -> f64 {
        cell_edge(index, self.root_size, self.scale(level))
    }

    pub fn index(&self, level: u8, coord: f64) -> i64 {
        cell_index(coord, self.root_size, self.scale(level))
    }

    pub fn cell_bbox(&self, c: &Cell) -> BoundingBox {
        BoundingBox {
            min: GeoPoint { lng: self.edge(c.level, c.ix), lat: self.edge(c.level, c.iy) },
            max: GeoPoint { lng: self.edge(c.level, c.ix + 1), lat: self.edge(c.level, c.iy + 1) },
        }
    }

    pub fn cell_area(&self, c: &Cell) -> f64 {
        self.cell_bbox(c).area()
    }

    /// Cell at `level` containing `p` (half-open).
    pub fn locate(&self, level: u8, p: &GeoPoint) -> Cell {
        Cell { level, ix: self.index(level, p.lng), iy: self.index(level, p.lat) }
    }

    /// Textual key used for deterministic tie-breaking. It is the tile-prefix
    /// on the production grid.
    pub fn cell_key(&self, c: &Cell) -> String {
        if self.ogb {
            return tile_prefix(&self.to_tile(c)).to_string();
        }
        let s = self.scale(c.level);
        let (rx, ry) = (c.ix.div_euclid(s), c.iy.div_euclid(s));
        let (mut dx, mut dy) = (c.ix.rem_euclid(s), c.iy.rem_euclid(s));
        let mut digits = Vec::with_capacity(c.level as usize);
        for _ in 0..c.level {
            digits.push(format!("{}.{}", dx % self.side, dy % self.side));
            dx /= self.side;
            dy /= self.side;
        }
        digits.reverse();
        let mut key = format!("ndn:/GRID/{rx}/{ry}");
        for d in digits {
            key.push('/');
            key.push_str(&d);
        }
        key.push_str("/GRID-ID");
        key
    }

    /// Production-grid cell as a [`TileId`]. Panics on other grids.
    pub fn to_tile(&self, c: &Cell) -> TileId {
        assert!(self.ogb, "not the production grid");
        TileId::from_indices(c.level, c.ix, c.iy).expect("cell inside the production grid")
    }

    pub fn from_tile(t: &TileId) -> Cell {
        let (ix, iy) = t.indices();
        Cell { level: t.level(), ix, iy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tessellation {
    pub tiles: Vec<Cell>,
    #[serde(rename = "queryArea")]
    pub query_area: BoundingBox,
    /// Covered area over query area; infinite for zero-area queries.
    pub stretch: f64,
    #[serde(rename = "constraintViolated")]
    pub constraint_violated: bool,
}

impl Tessellation {
    fn build(grid: &AbstractGrid, mut tiles: Vec<Cell>, query: BoundingBox, violated: bool) -> Self {
        tiles.sort_by_cached_key(|c| (c.level, grid.cell_key(c)));
        let covered: f64 = tiles.iter().map(|c| grid.cell_area(c)).sum();
        let area = query.area();
        let stretch = if area > 0.0 { covered / area } else { f64::INFINITY };
        Tessellation { tiles, query_area: query, stretch, constraint_violated: violated }
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn level_counts(&self) -> Vec<usize> {
        let max = self.tiles.iter().map(|c| c.level as usize).max().unwrap_or(0);
        let mut counts = vec![0; max + 1];
        for c in &self.tiles {
            counts[c.level as usize] += 1;
        }
        counts
    }
}

/// Inclusive index range of the cells at `level` overlapping `[lo, hi)`.
fn axis_range(grid: &AbstractGrid, level: u8, lo: f64, hi: f64) -> (i64, i64) {
    let first = grid.index(level, lo);
    if lo == hi {
        return (first, first);
    }
    let mut last = grid.index(level, hi);
    if grid.edge(level, last) >= hi {
        last -= 1;
    }
    (first, last.max(first))
}

/// Deepest-level index ranges of a query, plus helpers for overlap tests on
/// coarser cells.
struct Footprint<'g> {
    grid: &'g AbstractGrid,
    bbox: BoundingBox,
    x: (i64, i64),
    y: (i64, i64),
}

impl<'g> Footprint<'g> {
    fn new(grid: &'g AbstractGrid, bbox: &BoundingBox) -> Result<Self, TessellationError> {
        bbox.validate().map_err(|e| TessellationError::InvalidBox(e.to_string()))?;
        let e = grid.extent();
        let inside = bbox.min.lng >= e.min.lng
            && bbox.min.lat >= e.min.lat
            && bbox.max.lng <= e.max.lng
            && bbox.max.lat <= e.max.lat
            && bbox.min.lng < e.max.lng
            && bbox.min.lat < e.max.lat;
        if !inside {
            return Err(TessellationError::OutOfExtent);
        }
        let d = grid.deepest();
        Ok(Footprint {
            grid,
            bbox: *bbox,
            x: axis_range(grid, d, bbox.min.lng, bbox.max.lng),
            y: axis_range(grid, d, bbox.min.lat, bbox.max.lat),
        })
    }

    /// Deepest-level index span covered by `c`.
    fn span(&self, c: &Cell) -> ((i64, i64), (i64, i64)) {
        let f = self.grid.scale(self.grid.deepest() - c.level);
        ((c.ix * f, c.ix * f + f - 1), (c.iy * f, c.iy * f + f - 1))
    }

    fn overlaps(&self, c: &Cell) -> bool {
        let ((x0, x1), (y0, y1)) = self.span(c);
        x0 <= self.x.1 && x1 >= self.x.0 && y0 <= self.y.1 && y1 >= self.y.0
    }

    fn full(&self, c: &Cell) -> bool {
        let ((x0, x1), (y0, y1)) = self.span(c);
        x0 >= self.x.0 && x1 <= self.x.1 && y0 >= self.y.0 && y1 <= self.y.1
    }

    fn cells(&self, level: u8) -> Vec<Cell> {
        let f = self.grid.scale(self.grid.deepest() - level);
        let (x0, x1) = (self.x.0.div_euclid(f), self.x.1.div_euclid(f));
        let (y0, y1) = (self.y.0.div_euclid(f), self.y.1.div_euclid(f));
        let mut out = Vec::with_capacity(((x1 - x0 + 1) * (y1 - y0 + 1)) as usize);
        for ix in x0..=x1 {
            for iy in y0..=y1 {
                out.push(Cell { level, ix, iy });
            }
        }
        out
    }

    fn children(&self, c: &Cell) -> Vec<Cell> {
        let s = self.grid.side;
        let mut out = Vec::new();
        for dx in 0..s {
            for dy in 0..s {
                let child = Cell { level: c.level + 1, ix: c.ix * s + dx, iy: c.iy * s + dy };
                if self.overlaps(&child) {
                    out.push(child);
                }
            }
        }
        out
    }

    /// Tile-stretch used to rank aggregations. Zero-area queries fall back
    /// to the one-dimensional overlap along their non-degenerate axis.
    fn rank_stretch(&self, c: &Cell) -> f64 {
        let b = self.grid.cell_bbox(c);
        let axis = |lo: f64, hi: f64, qlo: f64, qhi: f64| {
            if qlo == qhi {
                1.0
            } else {
                (hi - lo) / (hi.min(qhi) - lo.max(qlo))
            }
        };
        axis(b.min.lng, b.max.lng, self.bbox.min.lng, self.bbox.max.lng) * axis(b.min.lat, b.max.lat, self.bbox.min.lat, self.bbox.max.lat)
    }
}

/// Ratio of a tile's area to the area it shares with `bbox`.
pub fn tile_stretch(grid: &AbstractGrid, tile: &Cell, bbox: &BoundingBox) -> Result<f64, TessellationError> {
    let b = grid.cell_bbox(tile);
    let shared = b.intersection_area(bbox);
    if shared <= 0.0 {
        return Err(TessellationError::UndefinedStretch);
    }
    Ok(b.area() / shared)
}

pub fn min_stretch(bbox: &BoundingBox, grid: &AbstractGrid) -> Result<Tessellation, TessellationError> {
    let fp = Footprint::new(grid, bbox)?;
    Ok(Tessellation::build(grid, fp.cells(grid.deepest()), *bbox, false))
}

/// Replaces complete sibling sets by their parent until none is left.
/// Accepts any set of disjoint cells.
pub fn mst_reduce(t: &Tessellation, grid: &AbstractGrid) -> Tessellation {
    use std::collections::{BTreeMap, BTreeSet};
    let mut set: BTreeSet<Cell> = t.tiles.iter().copied().collect();
    for level in (1..=grid.deepest()).rev() {
        let mut groups: BTreeMap<Cell, usize> = BTreeMap::new();
        for c in set.iter().filter(|c| c.level == level) {
            *groups.entry(c.parent(grid.side).unwrap()).or_default() += 1;
        }
        for (parent, n) in groups {
            if n == grid.ratio() {
                set.retain(|c| c.level != level || c.parent(grid.side) != Some(parent));
                set.insert(parent);
            }
        }
    }
    Tessellation::build(grid, set.into_iter().collect(), t.query_area, t.constraint_violated)
}

struct Node {
    cell: Cell,
    children: Vec<usize>,
    leaf: bool,
    alive: bool,
}

/// The reduced indexing tree of a query.
struct Tree {
    nodes: Vec<Node>,
    leaves_at: Vec<usize>,
    live_at: Vec<usize>,
    leaves: usize,
}

impl Tree {
    fn build(fp: &Footprint<'_>) -> Tree {
        let levels = fp.grid.levels as usize;
        let mut tree = Tree { nodes: Vec::new(), leaves_at: vec![0; levels], live_at: vec![0; levels], leaves: 0 };
        let mut stack: Vec<Cell> = fp.cells(0);
        stack.reverse();
        let mut pending: Vec<(Cell, Option<usize>)> = stack.into_iter().map(|c| (c, None)).collect();
        while let Some((cell, parent)) = pending.pop() {
            let leaf = cell.level == fp.grid.deepest() || fp.full(&cell);
            let id = tree.nodes.len();
            tree.nodes.push(Node { cell, children: Vec::new(), leaf, alive: true });
            tree.live_at[cell.level as usize] += 1;
            if leaf {
                tree.leaves_at[cell.level as usize] += 1;
                tree.leaves += 1;
            } else {
                for child in fp.children(&cell) {
                    pending.push((child, Some(id)));
                }
            }
            if let Some(p) = parent {
                tree.nodes[p].children.push(id);
            }
        }
        tree
    }

    /// Turns `v` into a leaf and drops its whole subtree.
    fn aggregate(&mut self, v: usize) {
        let mut stack = std::mem::take(&mut self.nodes[v].children);
        while let Some(d) = stack.pop() {
            let n = &mut self.nodes[d];
            n.alive = false;
            self.live_at[n.cell.level as usize] -= 1;
            if n.leaf {
                self.leaves_at[n.cell.level as usize] -= 1;
                self.leaves -= 1;
            }
            stack.append(&mut n.children);
        }
        let n = &mut self.nodes[v];
        n.leaf = true;
        self.leaves_at[n.cell.level as usize] += 1;
        self.leaves += 1;
    }

    fn is_candidate(&self, v: usize) -> bool {
        let n = &self.nodes[v];
        n.alive && !n.leaf && n.children.len() >= 2
    }

    fn leaf_cells(&self) -> Vec<Cell> {
        self.nodes.iter().filter(|n| n.alive && n.leaf).map(|n| n.cell).collect()
    }
}

/// Minimum stretch-and-tiles cover: the reduced tree's leaves.
pub fn mst(bbox: &BoundingBox, grid: &AbstractGrid) -> Result<Tessellation, TessellationError> {
    let fp = Footprint::new(grid, bbox)?;
    Ok(Tessellation::build(grid, Tree::build(&fp).leaf_cells(), *bbox, false))
}

pub fn constrained(bbox: &BoundingBox, k: usize, grid: &AbstractGrid) -> Result<Tessellation, TessellationError> {
    if k == 0 {
        return Err(TessellationError::InvalidConstraint);
    }
    let fp = Footprint::new(grid, bbox)?;
    if bbox.min == bbox.max {
        return Ok(Tessellation::build(grid, vec![grid.locate(grid.deepest(), &bbox.min)], *bbox, false));
    }
    let roots = fp.cells(0);
    if roots.len() > k {
        return Ok(Tessellation::build(grid, roots, *bbox, true));
    }
    let mut tree = Tree::build(&fp);
    if tree.leaves <= k {
        return Ok(Tessellation::build(grid, tree.leaf_cells(), *bbox, false));
    }

    let deepest = grid.deepest() as usize;
    // Candidates per level in aggregation order; dead entries are skipped lazily.
    let mut queues: Vec<Vec<(f64, String, usize)>> = vec![Vec::new(); deepest];
    for (id, n) in tree.nodes.iter().enumerate() {
        if (n.cell.level as usize) < deepest && tree.is_candidate(id) {
            queues[n.cell.level as usize].push((fp.rank_stretch(&n.cell), grid.cell_key(&n.cell), id));
        }
    }
    for q in &mut queues {
        q.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1)));
    }
    let mut heads = vec![0usize; deepest];

    while tree.leaves > k {
        let mut progressed = false;
        for level in 0..deepest {
            let fixed: usize = tree.leaves_at[..=level].iter().sum();
            if fixed + tree.live_at[level + 1] <= k {
                continue;
            }
            let q = &queues[level];
            while heads[level] < q.len() && !tree.is_candidate(q[heads[level]].2) {
                heads[level] += 1;
            }
            if let Some(&(_, _, id)) = q.get(heads[level]) {
                heads[level] += 1;
                tree.aggregate(id);
                progressed = true;
                break;
            }
        }
        if !progressed {
            // Unreachable while the root count respects k; kept as a guard.
            break;
        }
    }
    let violated = tree.leaves > k;
    Ok(Tessellation::build(grid, tree.leaf_cells(), *bbox, violated))
}

/// [`constrained`] on the production grid, returned as tiles.
pub fn constrained_tiles(bbox: &BoundingBox, k: usize) -> Result<(Tessellation, Vec<TileId>), TessellationError> {
    let grid = AbstractGrid::ogb();
    let t = constrained(bbox, k, &grid)?;
    let tiles = t.tiles.iter().map(|c| grid.to_tile(c)).collect();
    Ok((t, tiles))
}
