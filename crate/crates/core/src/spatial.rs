//! Uniform-grid nearest-neighbor index over a fixed point set.

use nalgebra::Vector3;

pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    lo: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: points of cell `c` are `order[start[c]..start[c + 1]]`.
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    /// `cell` is a hint; it is enlarged so the grid never exceeds ~4 cells per point.
    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let (mut lo, mut hi) = (Vector3::repeat(0.0), Vector3::repeat(0.0));
        if let Some(first) = points.first() {
            lo = *first;
            hi = *first;
            for p in points {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
        }
        let ext = hi - lo;
        let budget = (4 * points.len()).max(1) as f64;
        let min_cell = ((ext.x + 1e-9) * (ext.y + 1e-9) * (ext.z + 1e-9) / budget).cbrt();
        let cell = cell.max(min_cell).max(1e-9);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(1 << 20));
        let mut grid = Self {
            points,
            lo,
            cell,
            dims,
            start: Vec::new(),
            order: Vec::new(),
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut count = vec![0usize; ncell + 1];
        for &k in &keys {
            count[k + 1] += 1;
        }
        for i in 0..ncell {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.start = count;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.lo[a]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Closest point to `q` other than `exclude`, as `(index, distance)`.
    /// Among equidistant points the lowest index wins.
    pub fn nearest(&self, q: &Vector3<f64>, exclude: Option<usize>) -> Option<(usize, f64)> {
        if self.points.len() <= usize::from(exclude.is_some()) {
            return None;
        }
        let c = self.cell_of(q);
        let qc = [0, 1, 2].map(|a| (q[a] - self.lo[a]) / self.cell);
        let mut best: Option<(usize, f64)> = None;
        let max_r = self.dims.iter().copied().max().unwrap_or(1);
        for r in 0..=max_r {
            let lo = [0, 1, 2].map(|a| c[a] as isize - r as isize);
            let hi = [0, 1, 2].map(|a| c[a] as isize + r as isize);
            for z in lo[2].max(0)..=hi[2].min(self.dims[2] as isize - 1) {
                for y in lo[1].max(0)..=hi[1].min(self.dims[1] as isize - 1) {
                    let on_shell_yz = z == lo[2] || z == hi[2] || y == lo[1] || y == hi[1];
                    let mut x = lo[0].max(0);
                    let xe = hi[0].min(self.dims[0] as isize - 1);
                    while x <= xe {
                        if on_shell_yz || x == lo[0] || x == hi[0] {
                            let f = self.flat([x as usize, y as usize, z as usize]);
                            for &i in &self.order[self.start[f]..self.start[f + 1]] {
                                if Some(i) == exclude {
                                    continue;
                                }
                                let d2 = (self.points[i] - q).norm_squared();
                                let better = match best {
                                    None => true,
                                    Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                                };
                                if better {
                                    best = Some((i, d2));
                                }
                            }
                            x += 1;
                        } else {
                            x = hi[0];
                        }
                    }
                }
            }
            if let Some((_, d2)) = best {
                // Every unvisited cell is at least this far from `q`.
                let reach = (0..3)
                    .map(|a| {
                        let below = if c[a] > r { qc[a] - (c[a] - r) as f64 } else { f64::INFINITY };
                        let above = if c[a] + r + 1 < self.dims[a] {
                            (c[a] + r + 1) as f64 - qc[a]
                        } else {
                            f64::INFINITY
                        };
                        below.min(above)
                    })
                    .fold(f64::INFINITY, f64::min)
                    * self.cell;
                if d2 <= reach * reach {
                    break;
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|_| Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..0.5)))
            .collect();
        for cell in [0.1, 1.0, 7.0] {
            let g = PointGrid::new(&pts, cell);
            for _ in 0..200 {
                let q = Vector3::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-3.0..3.0));
                let want = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
                assert_eq!(g.nearest(&q, None).unwrap().1, want);
            }
            for (i, p) in pts.iter().enumerate().take(50) {
                let want = pts
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, o)| (o - p).norm())
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(g.nearest(p, Some(i)).unwrap().1, want);
            }
        }
    }

    #[test]
    fn degenerate_sets() {
        let none: Vec<Vector3<f64>> = Vec::new();
        assert!(PointGrid::new(&none, 1.0).nearest(&Vector3::zeros(), None).is_none());
        let one = vec![Vector3::new(1.0, 2.0, 3.0)];
        let g = PointGrid::new(&one, 1.0);
        assert!(g.nearest(&one[0], Some(0)).is_none());
        assert_eq!(g.nearest(&Vector3::zeros(), None).unwrap().0, 0);
        let same = vec![Vector3::zeros(); 3];
        assert_eq!(PointGrid::new(&same, 1.0).nearest(&Vector3::zeros(), Some(0)), Some((1, 0.0)));
    }
}
