//! Uniform hash-grid nearest-neighbour queries over static point sets.

use std::collections::HashMap;

use crate::geom::Vec3;

type Cell = (i64, i64, i64);

pub struct PointGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    origin: Vec3,
    cells: HashMap<Cell, Vec<u32>>,
    span: i64,
}

impl<'a> PointGrid<'a> {
    /// Builds a grid sized for roughly surface-like clouds (a few points per cell).
    pub fn new(points: &'a [Vec3]) -> Self {
        let (lo, hi) = bounds(points);
        let extent = (hi - lo).max().max(1e-9);
        let cell = (2.0 * extent / (points.len().max(1) as f64).sqrt()).max(1e-9);
        Self::with_cell_size(points, cell)
    }

    pub fn with_cell_size(points: &'a [Vec3], cell: f64) -> Self {
        let (lo, hi) = bounds(points);
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, &lo, cell)).or_default().push(i as u32);
        }
        let span = (((hi - lo).max() / cell).ceil() as i64).max(1);
        Self {
            points,
            cell,
            origin: lo,
            cells,
            span,
        }
    }

    /// Index and distance of the closest point, optionally skipping one index.
    pub fn nearest(&self, q: &Vec3, skip: Option<usize>) -> Option<(usize, f64)> {
        self.k_nearest(q, 1, skip).into_iter().next()
    }

    /// Up to `k` closest points sorted by distance (ties by index).
    pub fn k_nearest(&self, q: &Vec3, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        let available = self.points.len() - usize::from(skip.is_some());
        let k = k.min(available);
        if k == 0 {
            return Vec::new();
        }
        let center = key(q, &self.origin, self.cell);
        // Rings beyond the grid span plus the query's own offset from it hold nothing new.
        let offset = [
            center.0.clamp(0, self.span) - center.0,
            center.1.clamp(0, self.span) - center.1,
            center.2.clamp(0, self.span) - center.2,
        ]
        .iter()
        .map(|d| d.abs())
        .max()
        .unwrap_or(0);
        // Far outside the grid a linear scan beats walking empty rings.
        let side = (2 * offset + 1) as f64;
        if side * side > 4.0 * self.points.len() as f64 {
            return self.scan(q, k, skip);
        }
        let max_ring = self.span + offset + 1;
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        for ring in offset..=max_ring {
            for_each_cell_in_ring(center, ring, |c| {
                if let Some(list) = self.cells.get(&c) {
                    for &i in list {
                        let i = i as usize;
                        if Some(i) == skip {
                            continue;
                        }
                        let d = (self.points[i] - q).norm();
                        insert_sorted(&mut best, k, (i, d));
                    }
                }
            });
            // Anything in ring r+1 lies at least r cells away from the query.
            if best.len() == k && best[k - 1].1 <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

impl PointGrid<'_> {
    fn scan(&self, q: &Vec3, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        let mut best = Vec::with_capacity(k + 1);
        for (i, p) in self.points.iter().enumerate() {
            if Some(i) != skip {
                insert_sorted(&mut best, k, (i, (p - q).norm()));
            }
        }
        best
    }
}

fn insert_sorted(best: &mut Vec<(usize, f64)>, k: usize, item: (usize, f64)) {
    let pos = best
        .iter()
        .position(|&(i, d)| item.1 < d || (item.1 == d && item.0 < i))
        .unwrap_or(best.len());
    if pos < k {
        best.insert(pos, item);
        best.truncate(k);
    }
}

fn for_each_cell_in_ring(c: Cell, r: i64, mut f: impl FnMut(Cell)) {
    if r == 0 {
        f(c);
        return;
    }
    for dx in -r..=r {
        for dy in -r..=r {
            if dx.abs() == r || dy.abs() == r {
                for dz in -r..=r {
                    f((c.0 + dx, c.1 + dy, c.2 + dz));
                }
            } else {
                f((c.0 + dx, c.1 + dy, c.2 - r));
                f((c.0 + dx, c.1 + dy, c.2 + r));
            }
        }
    }
}

fn key(p: &Vec3, origin: &Vec3, cell: f64) -> Cell {
    (
        ((p.x - origin.x) / cell).floor() as i64,
        ((p.y - origin.y) / cell).floor() as i64,
        ((p.z - origin.z) / cell).floor() as i64,
    )
}

pub fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if points.is_empty() {
        (Vec3::zeros(), Vec3::zeros())
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_k(points: &[Vec3], q: &Vec3, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, p)| (i, (p - q).norm()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..800)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..0.2),
                )
            })
            .collect();
        let grid = PointGrid::new(&pts);
        for i in 0..200 {
            let q = if i % 2 == 0 {
                pts[i]
            } else {
                Vec3::new(
                    rng.random_range(-8.0..8.0),
                    rng.random_range(-8.0..8.0),
                    rng.random_range(-8.0..8.0),
                )
            };
            let skip = (i % 2 == 0).then_some(i);
            assert_eq!(grid.k_nearest(&q, 3, skip), brute_k(&pts, &q, 3, skip));
        }
    }

    #[test]
    fn handles_tiny_sets() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0)];
        let grid = PointGrid::new(&pts);
        assert_eq!(grid.nearest(&Vec3::zeros(), None).unwrap().0, 0);
        assert!(grid.k_nearest(&pts[0], 3, Some(0)).is_empty());
    }
}
