//! Voxel grids of attenuation values and their on-disk format.
//!
//! A volume is stored as `<name>.f32` (little-endian `f32`, x fastest, then y,
//! then z) next to `<name>.txt` holding `dims`, `spacing` and `origin`. The
//! origin is the outer corner of voxel `(0, 0, 0)`; voxel centers sit at
//! `origin + (i + ½)·spacing`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{format_err, invalid, Error, Result};
use crate::geometry::{FrameSpec, Ray, ScanGeometry};
use crate::io::{read_f32_file, write_f32_file};
use crate::phantom::{oracle_project, PointField};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    /// Isotropic voxel edge, mm.
    pub spacing: f64,
    /// Corner of the grid, mm.
    pub origin: Vector3<f64>,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: f64, origin: Vector3<f64>) -> Result<Self> {
        let g = Self { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// A cube of `n³` voxels with edge `extent` mm, centered on the isocenter.
    pub fn centered_cube(n: usize, extent: f64) -> Result<Self> {
        Self::new([n; 3], extent / n as f64, Vector3::repeat(-extent / 2.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(invalid("volume dims must be >= 1"));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(invalid("voxel spacing must be positive"));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(invalid("volume origin must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.spacing
    }

    pub fn lower(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn upper(&self) -> Vector3<f64> {
        self.origin + Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.spacing
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.lower() + self.upper()) * 0.5
    }

    /// Largest edge length of the grid box.
    pub fn extent(&self) -> f64 {
        let e = self.upper() - self.lower();
        e.x.max(e.y).max(e.z)
    }

    pub fn to_sidecar(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dims = {} {} {}", self.dims[0], self.dims[1], self.dims[2]);
        let _ = writeln!(s, "spacing = {}", self.spacing);
        let _ = writeln!(s, "origin = {} {} {}", self.origin.x, self.origin.y, self.origin.z);
        s
    }

    pub fn parse_sidecar(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let dims: String = kv.require("dims")?;
        let spacing: f64 = kv.require("spacing")?;
        let origin: String = kv.require("origin")?;
        kv.finish()?;
        let d: Vec<usize> = dims
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| invalid(format!("bad dims `{dims}`"))))
            .collect::<Result<_>>()?;
        let o: Vec<f64> = origin
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| invalid(format!("bad origin `{origin}`"))))
            .collect::<Result<_>>()?;
        if d.len() != 3 || o.len() != 3 {
            return Err(invalid("dims and origin need three components"));
        }
        Self::new([d[0], d[1], d[2]], spacing, Vector3::new(o[0], o[1], o[2]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationVolume {
    pub grid: GridSpec,
    pub values: Vec<f32>,
}

impl AttenuationVolume {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            values: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {:?} grid",
                values.len(),
                grid.dims
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i}")));
        }
        Ok(Self { grid, values })
    }

    /// Samples the field at every voxel center.
    pub fn from_fn(grid: GridSpec, f: impl Fn(&Vector3<f64>) -> f64 + Sync) -> Self {
        let [nx, ny, _] = grid.dims;
        let values = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
                f(&grid.voxel_center(i, j, k)) as f32
            })
            .collect();
        Self { grid, values }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.grid.index(i, j, k)]
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Trilinear interpolation between voxel centers; zero outside the grid box.
    pub fn sample(&self, x: &Vector3<f64>) -> f64 {
        let g = &self.grid;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut single = [false; 3];
        for a in 0..3 {
            let c = (x[a] - g.origin[a]) / g.spacing - 0.5;
            let n = g.dims[a];
            if c < -0.5 || c > n as f64 - 0.5 {
                return 0.0;
            }
            if n == 1 {
                single[a] = true;
                continue;
            }
            let c = c.clamp(0.0, (n - 1) as f64);
            let i0 = (c.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = c - i0 as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8usize {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let up = (corner >> a) & 1 == 1;
                if single[a] {
                    if up {
                        w = 0.0;
                    }
                    idx[a] = 0;
                } else {
                    w *= if up { frac[a] } else { 1.0 - frac[a] };
                    idx[a] = base[a] + usize::from(up);
                }
            }
            if w != 0.0 {
                acc += w * self.get(idx[0], idx[1], idx[2]) as f64;
            }
        }
        acc
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let (data, side) = volume_paths(base);
        write_f32_file(&data, &self.values)?;
        std::fs::write(side, self.grid.to_sidecar())?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (data, side) = volume_paths(base);
        let grid = GridSpec::parse_sidecar(&std::fs::read_to_string(&side)?)?;
        let values = read_f32_file(&data)?;
        if values.len() != grid.len() {
            return Err(format_err(
                data,
                format!("expected {} voxels, found {}", grid.len(), values.len()),
            ));
        }
        Self::from_values(grid, values)
    }
}

impl PointField for AttenuationVolume {
    fn value(&self, x: &Vector3<f64>, _t: f64) -> f64 {
        self.sample(x)
    }
}

/// `base.f32` and `base.txt` for a path given with or without extension.
pub fn volume_paths(base: &Path) -> (PathBuf, PathBuf) {
    let stem = base.with_extension("");
    (stem.with_extension("f32"), stem.with_extension("txt"))
}

/// Forward-projects a static volume through one frame by midpoint quadrature.
pub fn project_volume(volume: &AttenuationVolume, geometry: &ScanGeometry, frame: &FrameSpec, step: f64) -> Result<Vec<f32>> {
    let pose = geometry.pose(frame.angle_deg);
    let dirs = geometry.pixel_directions(&pose);
    let (lo, hi) = (volume.grid.lower(), volume.grid.upper());
    dirs.par_iter()
        .map(|d| {
            let ray = Ray {
                origin: pose.source,
                direction: *d,
                near: f64::NEG_INFINITY,
                far: f64::INFINITY,
            };
            match ray.clip_to_box(&lo, &hi) {
                Some(clipped) => oracle_project(volume, &clipped, frame.timestamp, step).map(|v| v as f32),
                None => Ok(0.0),
            }
        })
        .collect()
}
