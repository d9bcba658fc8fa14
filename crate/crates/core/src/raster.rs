//! Additive X-ray splatting of Gaussian kernels and its adjoint.
//!
//! Every pixel value is a sum of exact line integrals over the full ray,
//! `ρ·√(2π/q)·exp(−E/2)` with `q = dᵀPd` and `E` the precision-weighted
//! squared distance from the kernel center to the ray. Kernels are binned into
//! 16×16 pixel tiles by a conservative projected bounding box; per-pixel sums
//! always run in kernel index order, so results do not depend on threading.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{FramePose, FrameSpec, Ray, ScanGeometry};
use crate::kernel::ActivatedKernel;
use crate::real::{cast3, Real};

/// Kernel centers closer than this to the source are not projected.
pub const DEGENERATE_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub tile: usize,
    /// Footprint radius in units of the largest kernel scale; `None` evaluates
    /// every kernel on every pixel.
    pub cutoff_sigma: Option<f64>,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile: 16,
            cutoff_sigma: Some(3.0),
        }
    }
}

impl RasterConfig {
    pub fn exact() -> Self {
        Self {
            cutoff_sigma: None,
            ..Self::default()
        }
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl PixelBox {
    fn intersect(&self, o: &PixelBox) -> Option<PixelBox> {
        let b = PixelBox {
            row0: self.row0.max(o.row0),
            row1: self.row1.min(o.row1),
            col0: self.col0.max(o.col0),
            col1: self.col1.min(o.col1),
        };
        (b.row0 <= b.row1 && b.col0 <= b.col1).then_some(b)
    }

    pub fn pixels(&self) -> usize {
        (self.row1 - self.row0 + 1) * (self.col1 - self.col0 + 1)
    }
}

/// A rendered frame together with the binning state its adjoint needs.
#[derive(Debug, Clone)]
pub struct SplatImage<T: Real> {
    pub rows: usize,
    pub cols: usize,
    pub frame: FrameSpec,
    /// Row-major pixel values.
    pub values: Vec<T>,
    /// Projected footprint per kernel; `None` when off-detector or skipped.
    pub footprints: Vec<Option<PixelBox>>,
    /// Kernel ids per tile, ascending.
    pub tiles: Vec<Vec<u32>>,
    /// Kernels skipped because their center coincides with the source.
    pub skipped: usize,
    config: RasterConfig,
    fingerprint: u64,
}

impl<T: Real> SplatImage<T> {
    fn tiles_x(&self) -> usize {
        self.cols.div_ceil(self.config.tile)
    }

    fn tile_box(&self, t: usize) -> PixelBox {
        tile_box(t, self.tiles_x(), self.config.tile, self.rows, self.cols)
    }
}

fn tile_box(t: usize, tiles_x: usize, tile: usize, rows: usize, cols: usize) -> PixelBox {
    let (ty, tx) = (t / tiles_x, t % tiles_x);
    PixelBox {
        row0: ty * tile,
        row1: ((ty + 1) * tile).min(rows) - 1,
        col0: tx * tile,
        col1: ((tx + 1) * tile).min(cols) - 1,
    }
}

/// Gradients of a scalar loss with respect to each kernel's raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad<T: Real> {
    pub rho: T,
    pub position: Vector3<T>,
    pub rotation: Vector4<T>,
    pub scale: Vector3<T>,
}

impl<T: Real> KernelGrad<T> {
    pub fn zero() -> Self {
        Self {
            rho: T::ZERO,
            position: Vector3::zeros(),
            rotation: Vector4::zeros(),
            scale: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RasterGradients<T: Real> {
    pub kernels: Vec<KernelGrad<T>>,
    /// Norm of the positional gradient in normalized detector coordinates.
    pub view_grad_norm: Vec<T>,
    /// Whether the kernel's footprint touched this frame.
    pub hit: Vec<bool>,
}

/// Weighted sums over pixels from which one kernel's gradient follows.
#[derive(Debug, Clone, Copy)]
struct Partial<T: Real> {
    /// `Σ w·∂f/∂ρ`.
    rho: T,
    /// `Σ w·f·(ddᵀ/q + mmᵀ)`, packed xx, yy, zz, xy, xz, yz.
    s6: [T; 6],
    /// `Σ w·f·m`.
    m: Vector3<T>,
}

impl<T: Real> Partial<T> {
    fn zero() -> Self {
        Self {
            rho: T::ZERO,
            s6: [T::ZERO; 6],
            m: Vector3::zeros(),
        }
    }

    fn add(&mut self, o: &Self) {
        self.rho += o.rho;
        for k in 0..6 {
            self.s6[k] += o.s6[k];
        }
        self.m += o.m;
    }
}

/// Per-frame constants of one kernel.
#[derive(Clone, Copy)]
struct Prepared<T: Real> {
    precision: Matrix3<T>,
    delta: Vector3<T>,
    p_delta: Vector3<T>,
    rho: T,
}

impl<T: Real> Prepared<T> {
    fn new(k: &ActivatedKernel<T>, rho: T, origin: &Vector3<T>) -> Self {
        let delta = origin - k.position;
        Self {
            precision: k.precision,
            delta,
            p_delta: k.precision * delta,
            rho,
        }
    }

    /// `(f/ρ, q, m)` for unit direction `d`.
    #[inline]
    fn eval(&self, d: &Vector3<T>) -> (T, T, Vector3<T>) {
        let pd = self.precision * d;
        let q = d.dot(&pd);
        let t = d.dot(&self.p_delta) / q;
        let m = self.delta - d * t;
        let pm = self.p_delta - pd * t;
        let e = m.dot(&pm).relu();
        let g0 = T::lit((2.0 * PI).sqrt()) / q.sqrt() * (T::lit(-0.5) * e).exp();
        (g0, q, m)
    }

    #[inline]
    fn value(&self, d: &Vector3<T>) -> T {
        self.eval(d).0 * self.rho
    }

    #[inline]
    fn accumulate(&self, d: &Vector3<T>, w: T, acc: &mut Partial<T>) {
        let (g0, q, m) = self.eval(d);
        let f = g0 * self.rho;
        acc.rho += w * g0;
        let wf = w * f;
        let wq = wf / q;
        acc.s6[0] += wq * d.x * d.x + wf * m.x * m.x;
        acc.s6[1] += wq * d.y * d.y + wf * m.y * m.y;
        acc.s6[2] += wq * d.z * d.z + wf * m.z * m.z;
        acc.s6[3] += wq * d.x * d.y + wf * m.x * m.y;
        acc.s6[4] += wq * d.x * d.z + wf * m.x * m.z;
        acc.s6[5] += wq * d.y * d.z + wf * m.y * m.z;
        acc.m += m * wf;
    }
}

fn ray_in<T: Real>(ray: &Ray) -> (Vector3<T>, Vector3<T>) {
    (cast3(&ray.origin), cast3(&ray.direction))
}

/// Closed-form integral of `ρ·exp(−½(x−p)ᵀΣ⁻¹(x−p))` over the whole line of `ray`.
pub fn ray_integral<T: Real>(kernel: &ActivatedKernel<T>, rho: T, ray: &Ray) -> T {
    let (o, d) = ray_in::<T>(ray);
    Prepared::new(kernel, rho, &o).value(&d)
}

/// [`ray_integral`] and its gradient with respect to the kernel's raw parameters.
pub fn ray_integral_with_grad<T: Real>(kernel: &ActivatedKernel<T>, rho: T, ray: &Ray) -> (T, KernelGrad<T>) {
    let (o, d) = ray_in::<T>(ray);
    let prep = Prepared::new(kernel, rho, &o);
    let mut acc = Partial::zero();
    prep.accumulate(&d, T::ONE, &mut acc);
    (prep.value(&d), finish_gradient(kernel, &acc))
}

/// Chains pixel sums through `P = R·diag(s⁻²)·Rᵀ`, quaternion normalization and
/// the scale activation.
fn finish_gradient<T: Real>(k: &ActivatedKernel<T>, acc: &Partial<T>) -> KernelGrad<T> {
    let s = &acc.s6;
    let half = T::lit(-0.5);
    let gp = Matrix3::new(s[0], s[3], s[4], s[3], s[1], s[5], s[4], s[5], s[2]) * half;
    let position = k.precision * acc.m;
    let r = &k.rotation_matrix;
    let rgr = r.transpose() * gp * r;
    let inv_s2 = k.scale.map(|v| T::ONE / (v * v));
    let scale = Vector3::from_fn(|i, _| {
        let sk = k.scale[i];
        T::lit(-2.0) / (sk * sk * sk) * rgr[(i, i)] * k.scale_slope[i]
    });
    let g = gp * r * Matrix3::from_diagonal(&inv_s2) * T::lit(2.0);
    let q = &k.rotation;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = T::lit(2.0);
    let gq = Vector4::new(
        two * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]),
        two * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - two * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)] + w * g[(2, 1)]
            - two * x * g[(2, 2)]),
        two * (-two * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)] + z * g[(2, 1)]
            - two * y * g[(2, 2)]),
        two * (-two * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - two * z * g[(1, 1)] + y * g[(1, 2)] + x * g[(2, 0)]
            + y * g[(2, 1)]),
    );
    let rotation = (gq - q * q.dot(&gq)) / k.raw_rotation_norm;
    KernelGrad {
        rho: acc.rho,
        position,
        rotation,
        scale,
    }
}

/// Conservative detector box of the sphere of radius `radius` around `center`.
/// `None` when it misses the detector.
fn footprint(geometry: &ScanGeometry, pose: &FramePose, center: &Vector3<f64>, radius: Option<f64>) -> Option<PixelBox> {
    let full = PixelBox {
        row0: 0,
        row1: geometry.rows - 1,
        col0: 0,
        col1: geometry.cols - 1,
    };
    let Some(radius) = radius else {
        return Some(full);
    };
    let (mut cmin, mut cmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let off = Vector3::new(
            if corner & 1 == 0 { -radius } else { radius },
            if corner & 2 == 0 { -radius } else { radius },
            if corner & 4 == 0 { -radius } else { radius },
        );
        let rel = center + off - pose.source;
        let depth = rel.dot(&pose.central_axis);
        if depth <= 0.0 {
            return Some(full);
        }
        let mag = geometry.sdd / depth;
        let c = rel.dot(&pose.u_axis) * mag / geometry.du + geometry.cols as f64 / 2.0 - 0.5;
        let r = rel.dot(&pose.v_axis) * mag / geometry.dv + geometry.rows as f64 / 2.0 - 0.5;
        cmin = cmin.min(c);
        cmax = cmax.max(c);
        rmin = rmin.min(r);
        rmax = rmax.max(r);
    }
    let clamp_lo = |v: f64| v.ceil().max(0.0);
    let (c0, c1) = (clamp_lo(cmin), cmax.floor().min(geometry.cols as f64 - 1.0));
    let (r0, r1) = (clamp_lo(rmin), rmax.floor().min(geometry.rows as f64 - 1.0));
    if c0 > c1 || r0 > r1 {
        return None;
    }
    Some(PixelBox {
        row0: r0 as usize,
        row1: r1 as usize,
        col0: c0 as usize,
        col1: c1 as usize,
    })
}

fn fingerprint<T: Real>(kernels: &[ActivatedKernel<T>], rho: &[T], frame: &FrameSpec) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: f64| {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    mix(frame.angle_deg);
    mix(kernels.len() as f64);
    for (k, r) in kernels.iter().zip(rho) {
        for v in k.position.iter().chain(k.scale.iter()).chain(k.rotation.iter()) {
            mix(v.to_f64());
        }
        mix(r.to_f64());
    }
    h
}

fn check_inputs<T: Real>(kernels: &[ActivatedKernel<T>], rho: &[T], config: &RasterConfig) -> Result<()> {
    if kernels.len() != rho.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} kernels but {} amplitudes",
            kernels.len(),
            rho.len()
        )));
    }
    if config.tile == 0 {
        return Err(crate::error::invalid("tile size must be positive"));
    }
    if let Some(c) = config.cutoff_sigma {
        if !(c > 0.0) {
            return Err(crate::error::invalid("cutoff must be positive"));
        }
    }
    if kernels.len() > u32::MAX as usize {
        return Err(crate::error::invalid("too many kernels"));
    }
    Ok(())
}

fn pixel_dirs<T: Real>(geometry: &ScanGeometry, pose: &FramePose) -> Vec<Vector3<T>> {
    geometry.pixel_directions(pose).iter().map(cast3).collect()
}

/// Renders one frame.
pub fn splat_forward<T: Real>(
    kernels: &[ActivatedKernel<T>],
    rho: &[T],
    geometry: &ScanGeometry,
    frame: &FrameSpec,
    config: &RasterConfig,
) -> Result<SplatImage<T>> {
    geometry.validate()?;
    check_inputs(kernels, rho, config)?;
    let pose = geometry.pose(frame.angle_deg);
    let (rows, cols) = (geometry.rows, geometry.cols);
    let tiles_x = cols.div_ceil(config.tile);
    let tiles_y = rows.div_ceil(config.tile);

    let mut skipped = 0;
    let footprints: Vec<Option<PixelBox>> = kernels
        .iter()
        .map(|k| {
            let c: Vector3<f64> = cast3(&k.position);
            if (c - pose.source).norm() < DEGENERATE_DISTANCE {
                skipped += 1;
                return None;
            }
            footprint(geometry, &pose, &c, config.cutoff_sigma.map(|s| s * k.max_scale().to_f64()))
        })
        .collect();
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, fp) in footprints.iter().enumerate() {
        if let Some(b) = fp {
            for ty in b.row0 / config.tile..=b.row1 / config.tile {
                for tx in b.col0 / config.tile..=b.col1 / config.tile {
                    tiles[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
    }

    let origin: Vector3<T> = cast3(&pose.source);
    let prepared: Vec<Prepared<T>> = kernels.iter().zip(rho).map(|(k, &r)| Prepared::new(k, r, &origin)).collect();
    let dirs = pixel_dirs::<T>(geometry, &pose);
    let tile_values: Vec<Vec<T>> = (0..tiles.len())
        .into_par_iter()
        .map(|t| {
            let tb = tile_box(t, tiles_x, config.tile, rows, cols);
            let tw = tb.col1 - tb.col0 + 1;
            let mut buf = vec![T::ZERO; tb.pixels()];
            for &i in &tiles[t] {
                let i = i as usize;
                let Some(b) = footprints[i].and_then(|f| f.intersect(&tb)) else {
                    continue;
                };
                let prep = &prepared[i];
                for r in b.row0..=b.row1 {
                    for c in b.col0..=b.col1 {
                        buf[(r - tb.row0) * tw + (c - tb.col0)] += prep.value(&dirs[r * cols + c]);
                    }
                }
            }
            buf
        })
        .collect();
    let mut values = vec![T::ZERO; rows * cols];
    for (t, buf) in tile_values.iter().enumerate() {
        let tb = tile_box(t, tiles_x, config.tile, rows, cols);
        let tw = tb.col1 - tb.col0 + 1;
        for r in tb.row0..=tb.row1 {
            let src = &buf[(r - tb.row0) * tw..(r - tb.row0 + 1) * tw];
            values[r * cols + tb.col0..r * cols + tb.col1 + 1].copy_from_slice(src);
        }
    }
    Ok(SplatImage {
        rows,
        cols,
        frame: *frame,
        values,
        footprints,
        tiles,
        skipped,
        config: *config,
        fingerprint: fingerprint(kernels, rho, frame),
    })
}

/// Adjoint of [`splat_forward`] for upstream gradient `d_image`.
pub fn splat_backward<T: Real>(
    kernels: &[ActivatedKernel<T>],
    rho: &[T],
    geometry: &ScanGeometry,
    forward: &SplatImage<T>,
    d_image: &[T],
) -> Result<RasterGradients<T>> {
    check_inputs(kernels, rho, &forward.config)?;
    if forward.rows != geometry.rows || forward.cols != geometry.cols || forward.footprints.len() != kernels.len() {
        return Err(Error::MissingForwardState(format!(
            "forward state is for {} kernels on {}x{}, got {} kernels on {}x{}",
            forward.footprints.len(),
            forward.rows,
            forward.cols,
            kernels.len(),
            geometry.rows,
            geometry.cols
        )));
    }
    if forward.fingerprint != fingerprint(kernels, rho, &forward.frame) {
        return Err(Error::MissingForwardState("kernels or amplitudes changed since the forward pass".into()));
    }
    if d_image.len() != geometry.rows * geometry.cols {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient has {} pixels, image has {}",
            d_image.len(),
            geometry.rows * geometry.cols
        )));
    }
    let pose = geometry.pose(forward.frame.angle_deg);
    let origin: Vector3<T> = cast3(&pose.source);
    let prepared: Vec<Prepared<T>> = kernels.iter().zip(rho).map(|(k, &r)| Prepared::new(k, r, &origin)).collect();
    let dirs = pixel_dirs::<T>(geometry, &pose);
    let cols = geometry.cols;

    let per_tile: Vec<Vec<(u32, Partial<T>)>> = (0..forward.tiles.len())
        .into_par_iter()
        .map(|t| {
            let tb = forward.tile_box(t);
            let mut out = Vec::with_capacity(forward.tiles[t].len());
            for &i in &forward.tiles[t] {
                let iu = i as usize;
                let Some(b) = forward.footprints[iu].and_then(|f| f.intersect(&tb)) else {
                    continue;
                };
                let mut acc = Partial::zero();
                for r in b.row0..=b.row1 {
                    for c in b.col0..=b.col1 {
                        let w = d_image[r * cols + c];
                        if w != T::ZERO {
                            prepared[iu].accumulate(&dirs[r * cols + c], w, &mut acc);
                        }
                    }
                }
                out.push((i, acc));
            }
            out
        })
        .collect();
    let mut totals = vec![Partial::zero(); kernels.len()];
    for tile in &per_tile {
        for (i, p) in tile {
            totals[*i as usize].add(p);
        }
    }
    let hit: Vec<bool> = forward.footprints.iter().map(Option::is_some).collect();
    let half_w = T::lit(geometry.cols as f64 * geometry.du / 2.0);
    let half_h = T::lit(geometry.rows as f64 * geometry.dv / 2.0);
    let sdd = T::lit(geometry.sdd);
    let (ax, ux, vx): (Vector3<T>, Vector3<T>, Vector3<T>) = (cast3(&pose.central_axis), cast3(&pose.u_axis), cast3(&pose.v_axis));
    let (grads, view): (Vec<KernelGrad<T>>, Vec<T>) = kernels
        .par_iter()
        .zip(totals.par_iter())
        .zip(hit.par_iter())
        .map(|((k, acc), &h)| {
            if !h {
                return (KernelGrad::zero(), T::ZERO);
            }
            let g = finish_gradient(k, acc);
            let depth = (k.position - origin).dot(&ax);
            let gu = g.position.dot(&ux) * depth * half_w / sdd;
            let gv = g.position.dot(&vx) * depth * half_h / sdd;
            let n = (gu * gu + gv * gv).sqrt();
            (g, n)
        })
        .unzip();
    Ok(RasterGradients {
        kernels: grads,
        view_grad_norm: view,
        hit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{RawKernelParams, ScaleBounds};
    use approx::assert_relative_eq;

    fn iso(p: Vector3<f64>, s: f64) -> ActivatedKernel<f64> {
        ActivatedKernel::from_geometry(p, Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::repeat(s)).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let k = iso(Vector3::zeros(), 1.0);
        let through = Ray::new(Vector3::new(-5.0, 0.0, 0.0), Vector3::x()).unwrap();
        assert_relative_eq!(ray_integral(&k, 1.0, &through), 2.506628274631, epsilon = 1e-11);
        let off = Ray::new(Vector3::new(-5.0, 1.0, 0.0), Vector3::x()).unwrap();
        assert_relative_eq!(ray_integral(&k, 1.0, &off), 1.520346901066, epsilon = 1e-11);
        assert_eq!(ray_integral(&k, 0.0, &off), 0.0);
    }

    #[test]
    fn zero_kernels_zero_image() {
        let g = ScanGeometry::default();
        let f = g.frame(3).unwrap();
        let img = splat_forward::<f32>(&[], &[], &g, &f, &RasterConfig::default()).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isocenter_kernel_peaks_at_center() {
        let g = ScanGeometry::default();
        let f = g.frame(1).unwrap();
        let k = iso(Vector3::zeros(), 4.0);
        let img = splat_forward(&[k], &[0.1], &g, &f, &RasterConfig::default()).unwrap();
        let best = (0..img.values.len()).max_by(|&a, &b| img.values[a].total_cmp(&img.values[b])).unwrap();
        let (r, c) = (best / g.cols, best % g.cols);
        // Even detector: the four central pixels tie.
        assert!([31, 32].contains(&r) && [31, 32].contains(&c));
    }

    #[test]
    fn degenerate_kernel_is_skipped() {
        let g = ScanGeometry::default();
        let f = g.frame(1).unwrap();
        let src = g.pose(f.angle_deg).source;
        let ks = [iso(src, 1.0), iso(Vector3::zeros(), 2.0)];
        let img = splat_forward(&ks, &[1.0, 1.0], &g, &f, &RasterConfig::default()).unwrap();
        assert_eq!(img.skipped, 1);
        assert!(img.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_rejects_stale_state() {
        let g = ScanGeometry {
            rows: 8,
            cols: 8,
            du: 8.0,
            dv: 8.0,
            ..ScanGeometry::default()
        };
        let f = g.frame(1).unwrap();
        let ks = [iso(Vector3::zeros(), 3.0)];
        let img = splat_forward(&ks, &[1.0], &g, &f, &RasterConfig::default()).unwrap();
        let up = vec![1.0; 64];
        assert!(splat_backward(&ks, &[1.0], &g, &img, &up).is_ok());
        assert!(matches!(splat_backward(&ks, &[2.0], &g, &img, &up), Err(Error::MissingForwardState(_))));
        let two = [ks[0], ks[0]];
        assert!(splat_backward(&two, &[1.0, 1.0], &g, &img, &up).is_err());
        let zero = splat_backward(&ks, &[1.0], &g, &img, &vec![0.0; 64]).unwrap();
        assert_eq!(zero.kernels[0], KernelGrad::zero());
    }

    #[test]
    fn single_ray_gradient_matches_differences() {
        let bounds = ScaleBounds::new(0.5, 8.0).unwrap();
        let raw = RawKernelParams::new(Vector3::new(0.3, -0.4, 0.8), Vector4::new(0.9, 0.2, -0.3, 0.25), Vector3::new(0.2, -0.6, 0.9)).unwrap();
        let ray = Ray::new(Vector3::new(-20.0, 1.0, -0.5), Vector3::new(1.0, 0.1, 0.05)).unwrap();
        let rho = 0.7;
        let eval = |p: &RawKernelParams<f64>, r: f64| ray_integral(&ActivatedKernel::from_raw(p, &bounds).unwrap(), r, &ray);
        let (_, g) = ray_integral_with_grad(&ActivatedKernel::from_raw(&raw, &bounds).unwrap(), rho, &ray);
        let h = 1e-5;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        assert_relative_eq!(g.rho, fd(&|e| eval(&raw, rho + e)), max_relative = 1e-7);
        for a in 0..3 {
            let want = fd(&|e| {
                let mut n = raw;
                n.position[a] += e;
                eval(&n, rho)
            });
            assert_relative_eq!(g.position[a], want, max_relative = 1e-6);
            let want = fd(&|e| {
                let mut n = raw;
                n.scale[a] += e;
                eval(&n, rho)
            });
            assert_relative_eq!(g.scale[a], want, max_relative = 1e-6);
        }
        for a in 0..4 {
            let want = fd(&|e| {
                let mut n = raw;
                n.rotation[a] += e;
                eval(&n, rho)
            });
            assert_relative_eq!(g.rotation[a], want, max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    #[test]
    fn linear_in_rho() {
        let g = ScanGeometry {
            rows: 16,
            cols: 16,
            du: 8.0,
            dv: 8.0,
            ..ScanGeometry::default()
        };
        let f = g.frame(5).unwrap();
        let ks = [iso(Vector3::new(3.0, 1.0, 0.0), 5.0), iso(Vector3::new(-8.0, 2.0, 4.0), 7.0)];
        let a = splat_forward(&ks, &[0.5, 0.25], &g, &f, &RasterConfig::default()).unwrap();
        let b = splat_forward(&ks, &[2.0, 1.0], &g, &f, &RasterConfig::default()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(4.0 * x, *y);
        }
    }
}
