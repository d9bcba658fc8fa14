//! Feldkamp cone-beam filtered backprojection, and kernel initialization from
//! the resulting coarse volume.

use std::f64::consts::PI;

use nalgebra::{Vector3, Vector4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dataset::ProjectionDataset;
use crate::error::{invalid, Error, Result};
use crate::geometry::ScanGeometry;
use crate::kernel::{invert_scale_activation, KernelSet, RawKernelParams, ScaleBounds};
use crate::real::Real;
use crate::spatial::PointGrid;
use crate::volume::{AttenuationVolume, GridSpec};

/// Ramp filter with a Hann window, applied along detector rows.
struct RowFilter {
    len: usize,
    /// Frequency response including the spatial sampling factor.
    response: Vec<f64>,
}

impl RowFilter {
    fn new(cols: usize, tau: f64) -> Self {
        let len = (2 * cols).next_power_of_two();
        // Band-limited ramp sampled in space, wrapped for circular convolution.
        let mut h = vec![Complex::new(0.0, 0.0); len];
        for (i, v) in h.iter_mut().enumerate() {
            let n = if i <= len / 2 { i as i64 } else { i as i64 - len as i64 };
            let val = if n == 0 {
                1.0 / (4.0 * tau * tau)
            } else if n % 2 != 0 {
                -1.0 / ((n * n) as f64 * PI * PI * tau * tau)
            } else {
                0.0
            };
            *v = Complex::new(val, 0.0);
        }
        FftPlanner::new().plan_fft_forward(len).process(&mut h);
        let response = h
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let nu = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 } / len as f64;
                let hann = 0.5 * (1.0 + (2.0 * PI * nu).cos());
                c.re * tau * hann
            })
            .collect();
        Self { len, response }
    }

    fn apply(&self, row: &mut [f64], planner: &mut FftPlanner<f64>) {
        let fwd = planner.plan_fft_forward(self.len);
        let inv = planner.plan_fft_inverse(self.len);
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, r) in buf.iter_mut().zip(&self.response) {
            *b *= *r;
        }
        inv.process(&mut buf);
        let scale = 1.0 / self.len as f64;
        for (o, b) in row.iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }
}

/// Cosine-weighted, ramp-filtered copy of one image.
fn filter_image(geometry: &ScanGeometry, image: &[f32], filter: &RowFilter) -> Vec<f64> {
    let (h, w) = (geometry.rows, geometry.cols);
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each_init(FftPlanner::new, |planner, (r, row)| {
        for (c, o) in row.iter_mut().enumerate() {
            let (u, v) = geometry.detector_offset(r as f64 + 0.5, c as f64 + 0.5);
            let cosw = geometry.sdd / (geometry.sdd * geometry.sdd + u * u + v * v).sqrt();
            *o = image[r * w + c] as f64 * cosw;
        }
        filter.apply(row, planner);
    });
    out
}

/// Per-view angular weights: half the gap to each neighbor, rescaled so they
/// sum to π (every line measured once in a half turn).
fn view_weights(angles: &[f64]) -> Vec<f64> {
    let n = angles.len();
    let gap = |i: usize| (angles[i + 1] - angles[i]).abs();
    let raw: Vec<f64> = (0..n)
        .map(|i| match (i, n) {
            (_, 1) => 1.0,
            (0, _) => gap(0),
            (i, n) if i == n - 1 => gap(n - 2),
            (i, _) => 0.5 * (gap(i - 1) + gap(i)),
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w * PI / total).collect()
}

fn bilinear(img: &[f64], rows: usize, cols: usize, r: f64, c: f64) -> f64 {
    let r0 = r.floor();
    let c0 = c.floor();
    let (fr, fc) = (r - r0, c - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let at = |ri: isize, ci: isize| {
        if ri < 0 || ci < 0 || ri >= rows as isize || ci >= cols as isize {
            0.0
        } else {
            img[ri as usize * cols + ci as usize]
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1)) + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1))
}

/// Reconstructs a static volume from every frame of `dataset`.
pub fn fdk_reconstruct(dataset: &ProjectionDataset, grid: GridSpec) -> Result<AttenuationVolume> {
    let g = &dataset.geometry;
    grid.validate()?;
    if dataset.len() < 2 {
        return Err(invalid("FDK needs at least two frames"));
    }
    let px = g.rows * g.cols;
    if let Some(bad) = dataset.images.iter().position(|im| im.len() != px) {
        return Err(Error::DimensionMismatch(format!(
            "image {bad} has {} pixels, manifest says {px}",
            dataset.images[bad].len()
        )));
    }
    let tau = g.du * g.sod / g.sdd;
    let filter = RowFilter::new(g.cols, tau);
    let filtered: Vec<Vec<f64>> = dataset.images.iter().map(|im| filter_image(g, im, &filter)).collect();
    let angles: Vec<f64> = dataset.frames.iter().map(|f| f.angle_deg.to_radians()).collect();
    let weights = view_weights(&angles);
    let poses: Vec<_> = dataset.frames.iter().map(|f| g.pose(f.angle_deg)).collect();

    let [nx, ny, _] = grid.dims;
    let mut values = vec![0f32; grid.len()];
    values.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for j in 0..ny {
            for i in 0..nx {
                let x = grid.voxel_center(i, j, k);
                let mut acc = 0.0;
                for ((pose, img), w) in poses.iter().zip(&filtered).zip(&weights) {
                    let rel = x - pose.source;
                    let depth = rel.dot(&pose.central_axis);
                    if depth <= 0.0 {
                        continue;
                    }
                    let mag = g.sdd / depth;
                    let u = rel.dot(&pose.u_axis) * mag;
                    let v = rel.dot(&pose.v_axis) * mag;
                    let col = u / g.du + g.cols as f64 / 2.0 - 0.5;
                    let row = v / g.dv + g.rows as f64 / 2.0 - 0.5;
                    let dist = g.sod / depth;
                    acc += w * dist * dist * bilinear(img, g.rows, g.cols, row, col);
                }
                slab[i + nx * j] = acc.max(0.0) as f32;
            }
        }
    });
    AttenuationVolume::from_values(grid, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub count: usize,
    /// Voxels with value strictly above this are candidates.
    pub delta: f64,
    pub bounds: ScaleBounds,
    pub seed: u64,
}

/// Draws `count` kernels from voxels above `delta`, jittered within the voxel,
/// with isotropic scales equal to each position's nearest-neighbor distance.
pub fn sample_initial_kernels<T: Real>(volume: &AttenuationVolume, config: &InitConfig) -> Result<KernelSet<T>> {
    let candidates: Vec<usize> = volume
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v as f64 > config.delta)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoCandidates { delta: config.delta });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.count;
    let chosen: Vec<usize> = if candidates.len() >= m {
        let mut idx = sample(&mut rng, candidates.len(), m).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| candidates[i]).collect()
    } else {
        (0..m).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect()
    };
    let grid = &volume.grid;
    let [nx, ny, _] = grid.dims;
    let positions: Vec<Vector3<f64>> = chosen
        .iter()
        .map(|&idx| {
            let c = grid.voxel_center(idx % nx, (idx / nx) % ny, idx / (nx * ny));
            let jitter = Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5)) * grid.spacing;
            c + jitter
        })
        .collect();
    let index = PointGrid::new(&positions, grid.spacing);
    let nn: Vec<f64> = (0..positions.len())
        .into_par_iter()
        .map(|i| index.nearest(&positions[i], Some(i)).map_or(config.bounds.s_max(), |(_, d)| d))
        .collect();
    let mut set = KernelSet::new(config.bounds);
    for (p, d) in positions.iter().zip(&nn) {
        let d = d.clamp(config.bounds.s_min(), config.bounds.s_max());
        let raw_scale = invert_scale_activation(&Vector3::repeat(d), &config.bounds)?;
        set.push(RawKernelParams {
            position: p.map(T::lit),
            rotation: Vector4::new(T::ONE, T::ZERO, T::ZERO, T::ZERO),
            scale: raw_scale.map(T::lit),
        })?;
    }
    Ok(set)
}
