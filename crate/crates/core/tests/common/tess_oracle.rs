//! Exact minimum-area cover with at most `k` tiles, by dynamic programming
//! over the overlap tree, plus a plain enumeration used to cross-check it on
//! tiny inputs.

use tilebase::tessellation::{AbstractGrid, Cell};
use tilebase::BoundingBox;

fn overlaps(grid: &AbstractGrid, c: &Cell, q: &BoundingBox) -> bool {
    grid.cell_bbox(c).intersection_area(q) > 0.0
}

fn children(grid: &AbstractGrid, c: &Cell) -> Vec<Cell> {
    let s = grid.side();
    let mut out = Vec::new();
    for dx in 0..s {
        for dy in 0..s {
            out.push(Cell { level: c.level + 1, ix: c.ix * s + dx, iy: c.iy * s + dy });
        }
    }
    out
}

pub fn roots(grid: &AbstractGrid, q: &BoundingBox) -> Vec<Cell> {
    let e = grid.extent();
    let mut out = Vec::new();
    for ix in grid.index(0, e.min.lng)..grid.index(0, e.max.lng) {
        for iy in grid.index(0, e.min.lat)..grid.index(0, e.max.lat) {
            let c = Cell { level: 0, ix, iy };
            if overlaps(grid, &c, q) {
                out.push(c);
            }
        }
    }
    out
}

/// `f[j]` = least covered area using at most `j` tiles inside `c`.
fn table(grid: &AbstractGrid, c: &Cell, q: &BoundingBox, k: usize) -> Vec<f64> {
    let own = grid.cell_area(c);
    let mut best = vec![f64::INFINITY; k + 1];
    if c.level < grid.deepest() {
        let mut acc = vec![0.0; k + 1];
        for child in children(grid, c).iter().filter(|ch| overlaps(grid, ch, q)) {
            let t = table(grid, child, q, k);
            acc = combine(&acc, &t, k);
        }
        best = acc;
    }
    for v in best.iter_mut().skip(1) {
        *v = v.min(own);
    }
    best[0] = f64::INFINITY;
    best
}

fn combine(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![f64::INFINITY; k + 1];
    for i in 0..=k {
        for j in 0..=k - i {
            out[i + j] = out[i + j].min(a[i] + b[j]);
        }
    }
    for j in 1..=k {
        out[j] = out[j].min(out[j - 1]);
    }
    out
}

pub fn optimal_stretch(grid: &AbstractGrid, q: &BoundingBox, k: usize) -> Option<f64> {
    let mut acc = vec![0.0; k + 1];
    for r in roots(grid, q) {
        acc = combine(&acc, &table(grid, &r, q, k), k);
    }
    let a = acc[k];
    a.is_finite().then(|| a / q.area())
}

/// Every antichain of overlapping tiles that covers the query, smallest area.
pub fn enumerate_stretch(grid: &AbstractGrid, q: &BoundingBox, k: usize) -> Option<f64> {
    fn options(grid: &AbstractGrid, c: &Cell, q: &BoundingBox) -> Vec<(usize, f64)> {
        let mut out = vec![(1, grid.cell_area(c))];
        if c.level < grid.deepest() {
            let mut acc = vec![(0usize, 0.0f64)];
            for ch in children(grid, c).iter().filter(|ch| overlaps(grid, ch, q)) {
                let opts = options(grid, ch, q);
                acc = acc.iter().flat_map(|a| opts.iter().map(move |o| (a.0 + o.0, a.1 + o.1))).collect();
            }
            out.extend(acc);
        }
        out
    }
    let mut acc = vec![(0usize, 0.0f64)];
    for r in roots(grid, q) {
        let opts = options(grid, &r, q);
        acc = acc.iter().flat_map(|a| opts.iter().map(move |o| (a.0 + o.0, a.1 + o.1))).collect();
    }
    acc.into_iter().filter(|(n, _)| *n <= k).map(|(_, a)| a / q.area()).reduce(f64::min)
}
