//! Uniform spatial hash grid over 3D points: exact k-nearest-neighbor and
//! closest-point queries by expanding cell rings outward from the query.
//!
//! Node graphs hold hundreds of points and scans tens of thousands, so a
//! flat `HashMap` of cells is plenty; exactness is preserved because a ring
//! at Chebyshev cell distance R can only contain points at Euclidean
//! distance > (R-1) * cell_size from the query.

use nalgebra::Point3;
use std::collections::HashMap;

#[derive(Debug)]
pub struct PointGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Point3<f64>>,
}

impl PointGrid {
    pub fn build(points: &[Point3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key_for(p, cell)).or_default().push(i as u32);
        }
        PointGrid {
            cell,
            cells,
            points: points.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: u32) -> Point3<f64> {
        self.points[i as usize]
    }

    fn key_for(p: &Point3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices and distances of the k nearest points, ascending by distance,
    /// ties broken by lower index. Returns fewer than k only if the grid
    /// holds fewer than k points.
    pub fn k_nearest(&self, query: &Point3<f64>, k: usize) -> Vec<(u32, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let center = Self::key_for(query, self.cell);
        let mut found: Vec<(u32, f64)> = Vec::new();
        let mut ring = 0i64;
        loop {
            if self.ring_larger_than_data(ring) {
                // Queries far from the data would sweep huge empty shells;
                // a linear scan is exact and cheaper.
                let mut all = self.brute_scan(query);
                all.truncate(k);
                return all;
            }
            self.scan_ring(center, ring, |idx, p| {
                found.push((idx, (p - query).norm()));
            });
            found.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            found.truncate(k.max(64)); // keep some slack for tie ordering
            if found.len() >= k && found[k - 1].1 <= ring as f64 * self.cell {
                found.truncate(k);
                return found;
            }
            ring += 1;
        }
    }

    /// Closest point within `max_dist`, or `None`.
    pub fn nearest_within(&self, query: &Point3<f64>, max_dist: f64) -> Option<(u32, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let center = Self::key_for(query, self.cell);
        let mut best: Option<(u32, f64)> = None;
        let mut ring = 0i64;
        loop {
            if self.ring_larger_than_data(ring) {
                return self
                    .brute_scan(query)
                    .into_iter()
                    .next()
                    .filter(|&(_, d)| d <= max_dist);
            }
            self.scan_ring(center, ring, |idx, p| {
                let d = (p - query).norm();
                if d <= max_dist {
                    match best {
                        Some((bi, bd)) if bd < d || (bd == d && bi < idx) => {}
                        _ => best = Some((idx, d)),
                    }
                }
            });
            let reach = ring as f64 * self.cell;
            let target = best.map(|(_, d)| d).unwrap_or(max_dist);
            if reach >= target {
                return best;
            }
            ring += 1;
        }
    }

    /// All indices with distance <= radius.
    pub fn within_radius(&self, query: &Point3<f64>, radius: f64) -> Vec<u32> {
        let r_cells = (radius / self.cell).ceil() as i64 + 1;
        if (2 * r_cells + 1).pow(3) as usize > 8 * self.points.len() {
            let mut out: Vec<u32> = self
                .brute_scan(query)
                .into_iter()
                .take_while(|&(_, d)| d <= radius)
                .map(|(i, _)| i)
                .collect();
            out.sort_unstable();
            return out;
        }
        let mut out = Vec::new();
        let center = Self::key_for(query, self.cell);
        for ring in 0..=r_cells {
            self.scan_ring(center, ring, |idx, p| {
                if (p - query).norm() <= radius {
                    out.push(idx);
                }
            });
        }
        out.sort_unstable();
        out
    }

    /// True once a ring shell holds more cells than there are points; past
    /// that, linear scanning wins.
    fn ring_larger_than_data(&self, ring: i64) -> bool {
        let side = 2 * ring + 1;
        let shell = if ring == 0 {
            1
        } else {
            side * side * side - (side - 2) * (side - 2) * (side - 2)
        };
        shell as usize > 8 * self.points.len().max(1)
    }

    /// All points sorted by (distance, index).
    fn brute_scan(&self, query: &Point3<f64>) -> Vec<(u32, f64)> {
        let mut all: Vec<(u32, f64)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, (p - query).norm()))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all
    }

    /// Visits every point in cells at exactly Chebyshev distance `ring`.
    fn scan_ring<F: FnMut(u32, &Point3<f64>)>(
        &self,
        center: (i64, i64, i64),
        ring: i64,
        mut visit: F,
    ) {
        let mut visit_cell = |key: (i64, i64, i64)| {
            if let Some(indices) = self.cells.get(&key) {
                for &i in indices {
                    visit(i, &self.points[i as usize]);
                }
            }
        };
        if ring == 0 {
            visit_cell(center);
            return;
        }
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) == ring {
                        visit_cell((center.0 + dx, center.1 + dy, center.2 + dz));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_points(n: usize, seed: u64) -> Vec<Point3<f64>> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn brute_knn(points: &[Point3<f64>], q: &Point3<f64>, k: usize) -> Vec<u32> {
        let mut all: Vec<(u32, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, (p - q).norm()))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all.into_iter().map(|(i, _)| i).collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let points = random_points(200, 5);
        let grid = PointGrid::build(&points, 0.25);
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..50 {
            let q = Point3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            );
            let got: Vec<u32> = grid.k_nearest(&q, 4).into_iter().map(|(i, _)| i).collect();
            assert_eq!(got, brute_knn(&points, &q, 4));
        }
    }

    #[test]
    fn nearest_within_respects_cap() {
        let points = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let grid = PointGrid::build(&points, 0.3);
        let q = Point3::new(0.6, 0.0, 0.0);
        let hit = grid.nearest_within(&q, 0.5).unwrap();
        assert_eq!(hit.0, 1);
        assert!(grid.nearest_within(&q, 0.1).is_none());
    }

    #[test]
    fn within_radius_exact() {
        let points = random_points(100, 1);
        let grid = PointGrid::build(&points, 0.2);
        let q = Point3::new(0.1, 0.1, 0.1);
        let r = 0.35;
        let got = grid.within_radius(&q, r);
        let expect: Vec<u32> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| (*p - q).norm() <= r)
            .map(|(i, _)| i as u32)
            .collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn far_query_terminates() {
        let points = random_points(10, 2);
        let grid = PointGrid::build(&points, 0.1);
        let q = Point3::new(50.0, 50.0, 50.0);
        assert_eq!(grid.k_nearest(&q, 3).len(), 3);
    }
}
