//! Iso-surface extraction and surface distance metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{format_err, invalid, Result};
use crate::mc_tables::{EDGE_TABLE, TRIANGLE_TABLE};
use crate::spatial::PointGrid;
use crate::volume::AttenuationVolume;

/// Iso value for meshing ground-truth volumes.
pub const GT_ISO: f64 = 0.025;
/// Iso value for meshing reconstructed volumes.
pub const RECON_ISO: f64 = 0.008;
pub const DEFAULT_SURFACE_SAMPLES: usize = 100_000;
const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    /// World coordinates, mm.
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        self.triangles[i].map(|v| self.vertices[v as usize])
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    /// `V − E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(40 * (self.vertices.len() + self.triangles.len()));
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    /// Reads `v` and triangular `f` records; other lines are ignored.
    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut mesh = Self::default();
        for (n, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = |m: &str| format_err(path, format!("line {}: {m}", n + 1));
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.map(|x| x.parse().map_err(|_| bad("bad vertex"))).collect::<Result<_>>()?;
                    if c.len() < 3 || c.iter().any(|x| !x.is_finite()) {
                        return Err(bad("bad vertex"));
                    }
                    mesh.vertices.push(Vector3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|x| x.split('/').next().unwrap_or("").parse::<u32>().map_err(|_| bad("bad face")))
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 || idx.contains(&0) {
                        return Err(bad("only triangles with 1-based indices are supported"));
                    }
                    mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                _ => {}
            }
        }
        if mesh.triangles.iter().flatten().any(|&i| i as usize >= mesh.vertices.len()) {
            return Err(format_err(path, "face index out of range"));
        }
        Ok(mesh)
    }
}

// Cube corner offsets and, per edge, the lower grid point offset and axis.
const CORNERS: [[usize; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

/// Marching cubes over voxel centers with linear edge interpolation. Vertices
/// are shared between neighbouring cells; triangles with area at most 1e-12
/// are dropped.
pub fn marching_cubes(volume: &AttenuationVolume, iso: f64) -> Result<TriangleMesh> {
    let g = &volume.grid;
    let [nx, ny, nz] = g.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(invalid(format!("marching cubes needs at least 2 voxels per axis, got {:?}", g.dims)));
    }
    let value = |p: [usize; 3]| volume.get(p[0], p[1], p[2]) as f64;
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    if value([i + off[0], j + off[1], k + off[2]]) < iso {
                        case |= 1 << c;
                    }
                }
                let mask = EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut ids = [u32::MAX; 12];
                for (e, (off, axis)) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    let a = [i + off[0], j + off[1], k + off[2]];
                    let key = (g.index(a[0], a[1], a[2]), *axis);
                    ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let mut b = a;
                        b[*axis] += 1;
                        let (va, vb) = (value(a), value(b));
                        let s = if (vb - va).abs() > f64::MIN_POSITIVE { ((iso - va) / (vb - va)).clamp(0.0, 1.0) } else { 0.5 };
                        let pa = g.voxel_center(a[0], a[1], a[2]);
                        let pb = g.voxel_center(b[0], b[1], b[2]);
                        mesh.vertices.push(pa + (pb - pa) * s);
                        (mesh.vertices.len() - 1) as u32
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [ids[tri[0] as usize], ids[tri[1] as usize], ids[tri[2] as usize]];
                    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                        continue;
                    }
                    let [a, b, c] = t.map(|v| mesh.vertices[v as usize]);
                    if 0.5 * (b - a).cross(&(c - a)).norm() > MIN_TRIANGLE_AREA {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Area-weighted uniform samples on the surface.
pub fn sample_surface(mesh: &TriangleMesh, samples: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if mesh.is_empty() {
        return Err(invalid("cannot sample an empty mesh"));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for i in 0..mesh.triangles.len() {
        total += mesh.triangle_area(i);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(invalid("mesh has zero area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..samples)
        .map(|_| {
            let r = rng.gen::<f64>() * total;
            let t = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let su = u.sqrt();
            a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v)
        })
        .collect())
}

fn directed(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> (f64, f64) {
    let (lo, hi) = to.iter().fold((to[0], to[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let diag = (hi - lo).norm().max(1e-9);
    let index = PointGrid::new(to, diag / (to.len() as f64).cbrt());
    let d: Vec<f64> = from
        .par_iter()
        .map(|p| index.nearest(p, None).map_or(f64::INFINITY, |(_, d)| d))
        .collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let max = d.iter().copied().fold(0.0, f64::max);
    (mean, max)
}

/// Symmetric Chamfer distance (mean of the two directed mean
/// nearest-neighbour distances) and Hausdorff distance, both in mm. Each mesh
/// is sampled with its own generator seeded by `seed`.
pub fn chamfer_hausdorff(a: &TriangleMesh, b: &TriangleMesh, samples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples == 0 {
        return Err(invalid("need at least one surface sample"));
    }
    let pa = sample_surface(a, samples, seed)?;
    let pb = sample_surface(b, samples, seed)?;
    let (mab, hab) = directed(&pa, &pb);
    let (mba, hba) = directed(&pb, &pa);
    Ok((0.5 * (mab + mba), hab.max(hba)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;

    fn sphere(n: usize, r: f64) -> AttenuationVolume {
        AttenuationVolume::from_fn(GridSpec::centered_cube(n, 32.0).unwrap(), |x| r - x.norm())
    }

    #[test]
    fn uniform_below_iso_is_empty() {
        let v = AttenuationVolume::zeros(GridSpec::centered_cube(4, 4.0).unwrap());
        assert!(marching_cubes(&v, 0.5).unwrap().is_empty());
        assert!(marching_cubes(&v, -0.5).unwrap().is_empty());
    }

    #[test]
    fn sphere_is_closed_at_radius() {
        let v = sphere(24, 10.0);
        let m = marching_cubes(&v, 0.0).unwrap();
        assert!(!m.is_empty());
        let h = v.grid.spacing;
        for p in &m.vertices {
            assert!((p.norm() - 10.0).abs() < h, "{}", p.norm());
        }
        assert_eq!(m.euler_characteristic(), 2);
        let exact = 4.0 * std::f64::consts::PI * 100.0;
        assert!((m.area() / exact - 1.0).abs() < 0.05);
    }

    #[test]
    fn obj_round_trip() {
        let m = marching_cubes(&sphere(8, 10.0), 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.obj");
        m.save_obj(&p).unwrap();
        let back = TriangleMesh::load_obj(&p).unwrap();
        assert_eq!(back.triangles, m.triangles);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn self_distance_is_zero_and_symmetric() {
        let a = marching_cubes(&sphere(16, 9.0), 0.0).unwrap();
        let b = marching_cubes(&sphere(16, 11.0), 0.0).unwrap();
        assert_eq!(chamfer_hausdorff(&a, &a, 2000, 3).unwrap(), (0.0, 0.0));
        let ab = chamfer_hausdorff(&a, &b, 2000, 3).unwrap();
        let ba = chamfer_hausdorff(&b, &a, 2000, 3).unwrap();
        assert!((ab.0 - ba.0).abs() < 1e-12 && ab.1 == ba.1);
        assert!(ab.0 > 1.5 && ab.0 < 2.5, "{ab:?}");
        assert!(chamfer_hausdorff(&a, &TriangleMesh::default(), 10, 0).is_err());
    }
}
