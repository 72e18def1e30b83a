mod common;

use common::tess_oracle::{enumerate_stretch, optimal_stretch, roots};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilebase::tessellation::{constrained, AbstractGrid};
use tilebase::BoundingBox;

fn random_case(rng: &mut ChaCha8Rng, grid: &AbstractGrid, span: f64) -> (BoundingBox, usize) {
    loop {
        let k = rng.gen_range(1..=8);
        let w = rng.gen_range(0.05..span);
        let h = rng.gen_range(0.05..span);
        let x = rng.gen_range(0.0..grid.extent().max.lng - w);
        let y = rng.gen_range(0.0..grid.extent().max.lat - h);
        let q = BoundingBox::from_coords(x, y, x + w, y + h).unwrap();
        if roots(grid, &q).len() <= k {
            return (q, k);
        }
    }
}

#[test]
fn dp_matches_enumeration() {
    let grid = AbstractGrid::ratio4(3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let (q, k) = random_case(&mut rng, &grid, 1.3);
        let a = optimal_stretch(&grid, &q, k).unwrap();
        let b = enumerate_stretch(&grid, &q, k).unwrap();
        assert!((a - b).abs() < 1e-9 * a, "{a} vs {b}");
    }
}

#[test]
fn greedy_never_beats_optimum() {
    let grid = AbstractGrid::ratio4(6, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (q, k) = random_case(&mut rng, &grid, 3.0);
        let t = constrained(&q, k, &grid).unwrap();
        assert!(!t.constraint_violated && t.len() <= k);
        let opt = optimal_stretch(&grid, &q, k).unwrap();
        assert!(t.stretch >= opt * (1.0 - 1e-9));
    }
}
