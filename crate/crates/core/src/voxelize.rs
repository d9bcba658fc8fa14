//! Sampling the kernel attenuation field on a voxel grid.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::checkpoint::Model;
use crate::error::{invalid, Result};
use crate::real::Real;
use crate::volume::{AttenuationVolume, GridSpec};

/// Kernels are evaluated inside the axis-aligned box of their
/// `CUTOFF_SIGMA`-Mahalanobis ellipsoid; outside it each kernel is below
/// `ρ·exp(-CUTOFF_SIGMA²/2)`.
pub const CUTOFF_SIGMA: f64 = 3.0;

struct Footprint {
    center: Vector3<f64>,
    precision: Matrix3<f64>,
    rho: f64,
    lo: [usize; 3],
    hi: [usize; 3],
}

fn footprints<T: Real>(model: &Model<T>, rho: &[f64], grid: &GridSpec) -> Result<Vec<Footprint>> {
    let kernels = model.kernels.activate_all()?;
    let mut out = Vec::with_capacity(kernels.len());
    for (k, &r) in kernels.iter().zip(rho) {
        if r <= 0.0 {
            continue;
        }
        let center: Vector3<f64> = k.position.map(|v| v.to_f64());
        let cov: Matrix3<f64> = k.covariance.map(|v| v.to_f64());
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        let mut empty = false;
        for a in 0..3 {
            let half = CUTOFF_SIGMA * cov[(a, a)].sqrt();
            // Voxel i has center origin + (i + ½)·spacing.
            let to_index = |x: f64| (x - grid.origin[a]) / grid.spacing - 0.5;
            let first = to_index(center[a] - half).ceil();
            let last = to_index(center[a] + half).floor().min(grid.dims[a] as f64 - 1.0);
            if last < 0.0 || first > last {
                empty = true;
                break;
            }
            lo[a] = first.max(0.0) as usize;
            hi[a] = last as usize;
        }
        if !empty {
            out.push(Footprint {
                center,
                precision: k.precision.map(|v| v.to_f64()),
                rho: r,
                lo,
                hi,
            });
        }
    }
    Ok(out)
}

/// Evaluates the field for given per-kernel amplitudes. Work is split into
/// z-slabs, each owning a disjoint buffer; within a voxel, kernels add in
/// index order.
pub fn voxelize_with_rho<T: Real>(model: &Model<T>, rho: &[f64], grid: GridSpec) -> Result<AttenuationVolume> {
    grid.validate()?;
    if rho.len() != model.kernels.len() {
        return Err(invalid(format!("{} amplitudes for {} kernels", rho.len(), model.kernels.len())));
    }
    let fps = footprints(model, rho, &grid)?;
    let [nx, ny, nz] = grid.dims;
    let mut values = vec![0f32; grid.len()];
    values.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        let mut acc = vec![0f64; nx * ny];
        for f in fps.iter().filter(|f| (f.lo[2]..=f.hi[2]).contains(&k)) {
            for j in f.lo[1]..=f.hi[1] {
                for i in f.lo[0]..=f.hi[0] {
                    let d = grid.voxel_center(i, j, k) - f.center;
                    let e = d.dot(&(f.precision * d));
                    acc[j * nx + i] += f.rho * (-0.5 * e).exp();
                }
            }
        }
        for (o, a) in slab.iter_mut().zip(&acc) {
            *o = a.max(0.0) as f32;
        }
    });
    debug_assert_eq!(values.len(), nx * ny * nz);
    AttenuationVolume::from_values(grid, values)
}

fn amplitudes<T: Real>(model: &Model<T>, t: f64) -> Result<Vec<f64>> {
    let m = model.kernels.len();
    let positions: Vec<Vector3<T>> = (0..m).map(|i| model.kernels.position(i)).collect();
    let (rho, _) = model.dnaf.forward_batch(&positions, &vec![T::lit(t); m])?;
    Ok(rho.iter().map(|r| r.to_f64()).collect())
}

/// `V(t)`: the attenuation field at time `t`.
pub fn voxelize<T: Real>(model: &Model<T>, t: f64, grid: GridSpec) -> Result<AttenuationVolume> {
    voxelize_with_rho(model, &amplitudes(model, t)?, grid)
}

/// `(1/T)·Σ_j V(t_j)`. The field is linear in the amplitudes, so this
/// voxelizes once with each kernel's time-averaged amplitude.
pub fn average_volume<T: Real>(model: &Model<T>, timestamps: &[f64], grid: GridSpec) -> Result<AttenuationVolume> {
    if timestamps.is_empty() {
        return Err(invalid("no timestamps to average"));
    }
    let mut mean = vec![0.0; model.kernels.len()];
    for &t in timestamps {
        for (m, r) in mean.iter_mut().zip(amplitudes(model, t)?) {
            *m += r;
        }
    }
    let n = timestamps.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    voxelize_with_rho(model, &mean, grid)
}
