//! Synthetic dynamic vessel phantom and DSA image formation.
//!
//! Vessels are cubic Bézier tubes whose contrast fills in after a per-segment
//! arrival time. Projections are formed from simulated mask and fill
//! intensities and log-subtracted, so a static tissue background cancels.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::dataset::ProjectionDataset;
use crate::error::{invalid, Error, Result};
use crate::geometry::{frame_timestamps, FrameSpec, Ray, ScanGeometry};
use crate::volume::{AttenuationVolume, GridSpec};

/// Anything that can be evaluated at a point and time.
pub trait PointField: Sync {
    fn value(&self, x: &Vector3<f64>, t: f64) -> f64;
}

impl<F> PointField for F
where
    F: Fn(&Vector3<f64>, f64) -> f64 + Sync,
{
    fn value(&self, x: &Vector3<f64>, t: f64) -> f64 {
        self(x, t)
    }
}

/// Normalized time over which contrast ramps in (and out, with washout).
pub const BOLUS_RAMP: f64 = 0.1;
const POLYLINE_PIECES: usize = 48;

#[inline]
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Contrast fraction `τ` after arrival: cubic ramp over [`BOLUS_RAMP`], then 1,
/// optionally ramping back down once `τ` passes `washout`.
pub fn bolus(tau: f64, washout: Option<f64>) -> f64 {
    let fill = smoothstep(tau / BOLUS_RAMP);
    match washout {
        Some(w) => fill * (1.0 - smoothstep((tau - w) / BOLUS_RAMP)),
        None => fill,
    }
}

#[derive(Debug, Clone)]
pub struct VesselSegment {
    pub control: [Vector3<f64>; 4],
    pub radius_start: f64,
    pub radius_end: f64,
    /// mm⁻¹ once contrast has fully arrived.
    pub peak_attenuation: f64,
    pub arrival_time: f64,
    polyline: Vec<Vector3<f64>>,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl VesselSegment {
    pub fn new(
        control: [Vector3<f64>; 4],
        radius_start: f64,
        radius_end: f64,
        peak_attenuation: f64,
        arrival_time: f64,
    ) -> Result<Self> {
        if !(radius_start > 0.0 && radius_end > 0.0) {
            return Err(invalid("vessel radii must be positive"));
        }
        if !(0.0..=1.0).contains(&arrival_time) {
            return Err(invalid(format!("arrival time {arrival_time} outside [0, 1]")));
        }
        if !(peak_attenuation >= 0.0 && peak_attenuation.is_finite()) {
            return Err(invalid("peak attenuation must be nonnegative"));
        }
        let polyline: Vec<_> = (0..=POLYLINE_PIECES)
            .map(|i| bezier(&control, i as f64 / POLYLINE_PIECES as f64))
            .collect();
        // The curve lies in the hull of its control points.
        let reach = 1.5 * radius_start.max(radius_end);
        let mut lo = control[0];
        let mut hi = control[0];
        for c in &control[1..] {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        Ok(Self {
            control,
            radius_start,
            radius_end,
            peak_attenuation,
            arrival_time,
            polyline,
            lo: lo.add_scalar(-reach),
            hi: hi.add_scalar(reach),
        })
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        (self.lo, self.hi)
    }

    pub fn max_radius(&self) -> f64 {
        self.radius_start.max(self.radius_end)
    }

    /// Distance to the centerline and the curve parameter of the closest point.
    fn closest(&self, x: &Vector3<f64>) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.polyline.windows(2).enumerate() {
            let seg = w[1] - w[0];
            let len2 = seg.norm_squared();
            let s = if len2 > 0.0 {
                ((x - w[0]).dot(&seg) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d2 = (w[0] + seg * s - x).norm_squared();
            if d2 < best.0 {
                best = (d2, (i as f64 + s) / POLYLINE_PIECES as f64);
            }
        }
        (best.0.sqrt(), best.1)
    }

    /// Time-independent part: peak inside the radius, smooth falloff to zero at 1.5×.
    pub fn spatial(&self, x: &Vector3<f64>) -> f64 {
        if (0..3).any(|k| x[k] < self.lo[k] || x[k] > self.hi[k]) {
            return 0.0;
        }
        let (dist, s) = self.closest(x);
        let r = self.radius_start + (self.radius_end - self.radius_start) * s;
        self.peak_attenuation * (1.0 - smoothstep((dist - r) / (0.5 * r)))
    }
}

fn bezier(c: &[Vector3<f64>; 4], s: f64) -> Vector3<f64> {
    let u = 1.0 - s;
    c[0] * (u * u * u) + c[1] * (3.0 * u * u * s) + c[2] * (3.0 * u * s * s) + c[3] * (s * s * s)
}

/// Soft-edged uniform ellipsoid standing in for static tissue.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueEllipsoid {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    pub attenuation: f64,
}

impl TissueEllipsoid {
    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        let q = (x - self.center).component_div(&self.semi_axes).norm();
        self.attenuation * (1.0 - smoothstep((q - 0.9) / 0.1))
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        (self.center - self.semi_axes, self.center + self.semi_axes)
    }
}

#[derive(Debug, Clone)]
pub struct VesselPhantom {
    pub segments: Vec<VesselSegment>,
    pub background: Option<TissueEllipsoid>,
    /// Normalized time after arrival at which contrast washes out; `None` keeps it.
    pub washout: Option<f64>,
}

impl VesselPhantom {
    /// Three-generation branching tree of seven segments within ±32 mm of the
    /// isocenter, arrivals staggered at 0, 0.25 and 0.5, inside a tissue ellipsoid.
    pub fn default_tree() -> Self {
        let v = Vector3::new;
        let seg = |c: [Vector3<f64>; 4], r0, r1, arrival| VesselSegment::new(c, r0, r1, 0.08, arrival).unwrap();
        let segments = vec![
            seg([v(0., 0., -30.), v(3., -2., -20.), v(-3., 2., -12.), v(0., 0., -4.)], 4.5, 4.0, 0.0),
            seg([v(0., 0., -4.), v(-6., 2., 1.), v(-12., 4., 6.), v(-16., 5., 12.)], 3.5, 3.0, 0.25),
            seg([v(0., 0., -4.), v(6., -2., 1.), v(12., -4., 6.), v(16., -5., 12.)], 3.5, 3.0, 0.25),
            seg([v(-16., 5., 12.), v(-20., 8., 17.), v(-22., 13., 22.), v(-24., 17., 28.)], 3.0, 2.5, 0.5),
            seg([v(-16., 5., 12.), v(-15., 0., 18.), v(-12., -5., 23.), v(-9., -9., 28.)], 3.0, 2.5, 0.5),
            seg([v(16., -5., 12.), v(20., -8., 17.), v(22., -13., 22.), v(24., -17., 28.)], 3.0, 2.5, 0.5),
            seg([v(16., -5., 12.), v(15., 0., 18.), v(12., 5., 23.), v(9., 9., 28.)], 3.0, 2.5, 0.5),
        ];
        Self {
            segments,
            background: Some(TissueEllipsoid {
                center: Vector3::zeros(),
                semi_axes: Vector3::new(60.0, 60.0, 55.0),
                attenuation: 0.02,
            }),
            washout: None,
        }
    }

    pub fn empty() -> Self {
        Self {
            segments: Vec::new(),
            background: None,
            washout: None,
        }
    }

    pub fn bolus_factor(&self, segment: &VesselSegment, t: f64) -> f64 {
        bolus(t - segment.arrival_time, self.washout)
    }

    pub fn tissue_attenuation(&self, x: &Vector3<f64>) -> f64 {
        self.background.as_ref().map_or(0.0, |b| b.value(x))
    }

    /// Contrast attenuation averaged over the given timestamps.
    pub fn time_averaged_attenuation(&self, x: &Vector3<f64>, timestamps: &[f64]) -> f64 {
        if timestamps.is_empty() {
            return 0.0;
        }
        self.segments
            .iter()
            .map(|s| {
                let sp = s.spatial(x);
                if sp == 0.0 {
                    return 0.0;
                }
                let mean_bolus = timestamps.iter().map(|&t| self.bolus_factor(s, t)).sum::<f64>() / timestamps.len() as f64;
                sp * mean_bolus
            })
            .sum()
    }
}

/// Contrast-agent attenuation of the phantom at `x`, time `t`.
pub fn phantom_attenuation(phantom: &VesselPhantom, x: &Vector3<f64>, t: f64) -> f64 {
    phantom
        .segments
        .iter()
        .map(|s| {
            let b = phantom.bolus_factor(s, t);
            if b == 0.0 {
                0.0
            } else {
                s.spatial(x) * b
            }
        })
        .sum()
}

impl PointField for VesselPhantom {
    fn value(&self, x: &Vector3<f64>, t: f64) -> f64 {
        phantom_attenuation(self, x, t)
    }
}

fn check_quadrature(ray: &Ray, step: f64) -> Result<usize> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid(format!("quadrature step must be positive, got {step}")));
    }
    if !ray.is_bounded() || ray.far < ray.near {
        return Err(invalid("quadrature needs a bounded ray"));
    }
    Ok((((ray.far - ray.near) / step).ceil() as usize).max(1))
}

/// Composite midpoint rule of `field(·, t)` over `[near, far]` with spacing ≤ `step`.
pub fn oracle_project<F: PointField + ?Sized>(field: &F, ray: &Ray, t: f64, step: f64) -> Result<f64> {
    let n = check_quadrature(ray, step)?;
    let h = (ray.far - ray.near) / n as f64;
    let mut acc = 0.0;
    for k in 0..n {
        let v = field.value(&ray.at(ray.near + (k as f64 + 0.5) * h), t);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("field value {v} at sample {k}")));
        }
        acc += v;
    }
    Ok(acc * h)
}

/// Midpoint samples of the global grid on `ray` restricted to a box outside of
/// which `f` vanishes. Equals the unrestricted sum up to summation order.
fn project_within_box(ray: &Ray, n: usize, lo: &Vector3<f64>, hi: &Vector3<f64>, f: impl Fn(&Vector3<f64>) -> f64) -> f64 {
    let Some(clip) = ray.clip_to_box(lo, hi) else {
        return 0.0;
    };
    let h = (ray.far - ray.near) / n as f64;
    let k0 = ((clip.near - ray.near) / h - 0.5).ceil().max(0.0) as usize;
    let k1 = (((clip.far - ray.near) / h - 0.5).floor().max(-1.0) + 1.0) as usize;
    (k0..k1.min(n))
        .map(|k| f(&ray.at(ray.near + (k as f64 + 0.5) * h)))
        .sum::<f64>()
        * h
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    /// Quadrature step along each ray, mm.
    pub step: f64,
    /// Unattenuated source intensity.
    pub i0: f64,
    /// Rays are bounded to a sphere of this radius around the isocenter.
    pub scene_radius: f64,
    /// Poisson noise on raw intensities, seeded; `None` is noise-free.
    pub noise_seed: Option<u64>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            // A quarter of the 2 mm desk voxel.
            step: 0.5,
            i0: 1e5,
            scene_radius: 111.0,
            noise_seed: None,
        }
    }
}

/// Mask and fill line integrals `(∫tissue, ∫vessel(t))` for one ray.
fn ray_integrals(phantom: &VesselPhantom, ray: &Ray, n: usize, t: f64) -> (f64, f64) {
    let tissue = phantom.background.as_ref().map_or(0.0, |b| {
        let (lo, hi) = b.bounds();
        project_within_box(ray, n, &lo, &hi, |x| b.value(x))
    });
    let vessel = phantom
        .segments
        .iter()
        .map(|s| {
            let bf = phantom.bolus_factor(s, t);
            if bf == 0.0 {
                return 0.0;
            }
            let (lo, hi) = s.bounds();
            bf * project_within_box(ray, n, &lo, &hi, |x| s.spatial(x))
        })
        .sum();
    (tissue, vessel)
}

/// Simulates mask and fill runs and returns their log-subtracted DSA frames.
pub fn synthesize_dsa_dataset(phantom: &VesselPhantom, geometry: &ScanGeometry, config: &SynthesisConfig) -> Result<ProjectionDataset> {
    if !(config.i0 > 0.0 && config.i0.is_finite()) {
        return Err(invalid(format!("source intensity must be positive, got {}", config.i0)));
    }
    if !(config.scene_radius > 0.0 && config.scene_radius < geometry.sod) {
        return Err(invalid("scene radius must be positive and exclude the source"));
    }
    let frames = frame_timestamps(geometry)?;
    let images = frames
        .par_iter()
        .map(|f| synthesize_frame(phantom, geometry, f, config))
        .collect::<Result<Vec<_>>>()?;
    ProjectionDataset::new(geometry.clone(), frames, images)
}

fn synthesize_frame(phantom: &VesselPhantom, geometry: &ScanGeometry, frame: &FrameSpec, config: &SynthesisConfig) -> Result<Vec<f32>> {
    let pose = geometry.pose(frame.angle_deg);
    let mut rng = config
        .noise_seed
        .map(|s| ChaCha8Rng::seed_from_u64(s ^ (frame.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let mut image = Vec::with_capacity(geometry.rows * geometry.cols);
    for d in geometry.pixel_directions(&pose) {
        let full = Ray::new(pose.source, d)?;
        let Some(ray) = full.clip_to_sphere(&Vector3::zeros(), config.scene_radius) else {
            image.push(0.0);
            continue;
        };
        let n = check_quadrature(&ray, config.step)?;
        let (tissue, vessel) = ray_integrals(phantom, &ray, n, frame.timestamp);
        let mut mask = config.i0 * (-tissue).exp();
        let mut fill = config.i0 * (-(tissue + vessel)).exp();
        if let Some(rng) = rng.as_mut() {
            mask = poisson(rng, mask);
            fill = poisson(rng, fill);
        }
        let dsa = mask.ln() - fill.ln();
        if !dsa.is_finite() {
            return Err(Error::NonFinite(format!("DSA value in frame {}", frame.index)));
        }
        image.push(dsa.max(0.0) as f32);
    }
    Ok(image)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    match Poisson::new(mean) {
        Ok(p) => p.sample(rng).max(1.0),
        Err(_) => 1.0,
    }
}

/// Reference volume: contrast attenuation averaged over every frame timestamp.
pub fn ground_truth_volume(phantom: &VesselPhantom, geometry: &ScanGeometry, grid: GridSpec) -> Result<AttenuationVolume> {
    let ts: Vec<f64> = frame_timestamps(geometry)?.iter().map(|f| f.timestamp).collect();
    Ok(AttenuationVolume::from_fn(grid, |x| phantom.time_averaged_attenuation(x, &ts)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight(peak: f64, arrival: f64) -> VesselSegment {
        VesselSegment::new(
            [
                Vector3::new(-10.0, 0.0, 0.0),
                Vector3::new(-3.0, 0.0, 0.0),
                Vector3::new(3.0, 0.0, 0.0),
                Vector3::new(10.0, 0.0, 0.0),
            ],
            2.0,
            2.0,
            peak,
            arrival,
        )
        .unwrap()
    }

    fn single(peak: f64, arrival: f64) -> VesselPhantom {
        VesselPhantom {
            segments: vec![straight(peak, arrival)],
            background: None,
            washout: None,
        }
    }

    #[test]
    fn bolus_shape() {
        assert_eq!(bolus(-0.01, None), 0.0);
        assert_eq!(bolus(0.0, None), 0.0);
        assert_relative_eq!(bolus(0.05, None), 0.5);
        assert_eq!(bolus(0.1, None), 1.0);
        assert_eq!(bolus(0.7, None), 1.0);
        assert_eq!(bolus(0.7, Some(0.3)), 0.0);
    }

    #[test]
    fn attenuation_cases() {
        let p = single(0.05, 0.2);
        assert_eq!(phantom_attenuation(&p, &Vector3::new(0.0, 5.0, 0.0), 1.0), 0.0);
        assert_eq!(phantom_attenuation(&p, &Vector3::zeros(), 0.1), 0.0);
        assert_relative_eq!(phantom_attenuation(&p, &Vector3::new(1.0, 0.0, 0.0), 0.9), 0.05, epsilon = 1e-12);
        // Halfway through the falloff shell, smoothstep(0.5) = 0.5.
        assert_relative_eq!(phantom_attenuation(&p, &Vector3::new(0.0, 2.5, 0.0), 0.9), 0.025, epsilon = 1e-9);
        assert!(VesselSegment::new([Vector3::zeros(); 4], 0.0, 1.0, 0.1, 0.0).is_err());
        assert!(VesselSegment::new([Vector3::zeros(); 4], 1.0, 1.0, 0.1, 1.5).is_err());
    }

    fn bounded(origin: Vector3<f64>, dir: Vector3<f64>, near: f64, far: f64) -> Ray {
        Ray {
            near,
            far,
            ..Ray::new(origin, dir).unwrap()
        }
    }

    #[test]
    fn quadrature_cases() {
        let ray = bounded(Vector3::new(-20.0, 0.0, 0.0), Vector3::x(), 0.0, 40.0);
        assert_eq!(oracle_project(&|_: &Vector3<f64>, _| 0.0, &ray, 0.0, 0.1).unwrap(), 0.0);
        // Box of height 0.3 on x in [-3.3, 4.1].
        let boxf = |x: &Vector3<f64>, _| if (-3.3..=4.1).contains(&x.x) { 0.3 } else { 0.0 };
        let step = 0.25;
        let v = oracle_project(&boxf, &ray, 0.0, step).unwrap();
        assert!((v - 0.3 * 7.4).abs() <= 2.0 * step * 0.3);
        // Unit isotropic Gaussian through its center.
        let g = |x: &Vector3<f64>, _| (-0.5 * x.norm_squared()).exp();
        let v = oracle_project(&g, &ray, 0.0, 0.01).unwrap();
        assert_relative_eq!(v, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-8);
        assert!(oracle_project(&g, &ray, 0.0, 0.0).is_err());
        let unbounded = Ray::new(Vector3::zeros(), Vector3::x()).unwrap();
        assert!(oracle_project(&g, &unbounded, 0.0, 0.1).is_err());
        let nan = |_: &Vector3<f64>, _| f64::NAN;
        assert!(oracle_project(&nan, &ray, 0.0, 1.0).is_err());
    }

    #[test]
    fn quadrature_converges_second_order() {
        // Smooth field with compact-ish support; the ray starts inside it, so the
        // error is dominated by the midpoint rule's h² term.
        let f = |x: &Vector3<f64>, _| 1.0 / (1.0 + x.x * x.x);
        let ray = bounded(Vector3::new(-1.0, 0.0, 0.0), Vector3::x(), 0.0, 4.0);
        let exact = 3.0f64.atan() + 1.0f64.atan();
        let errs: Vec<f64> = [0.4, 0.2, 0.1]
            .iter()
            .map(|&h| (oracle_project(&f, &ray, 0.0, h).unwrap() - exact).abs())
            .collect();
        let c = errs[0] / 0.16;
        for (e, h) in errs.iter().zip([0.4f64, 0.2, 0.1]) {
            assert!(*e <= 1.5 * c * h * h, "err {e} at h {h}");
        }
        let order = (errs[0] / errs[2]).log2() / 2.0;
        assert!((order - 2.0).abs() < 0.2, "order {order}");
    }

    #[test]
    fn boxed_projection_matches_plain_quadrature() {
        let p = VesselPhantom::default_tree();
        let ray = bounded(Vector3::new(-100.0, 1.0, -2.0), Vector3::new(1.0, 0.05, 0.2), 0.0, 200.0);
        let n = check_quadrature(&ray, 0.5).unwrap();
        let (_, vessel) = ray_integrals(&p, &ray, n, 0.9);
        let plain = oracle_project(&p, &ray, 0.9, 0.5).unwrap();
        assert!(plain > 0.0);
        assert_relative_eq!(vessel, plain, max_relative = 1e-12);
    }

    #[test]
    fn default_tree_shape() {
        let p = VesselPhantom::default_tree();
        assert_eq!(p.segments.len(), 7);
        let arrivals: Vec<f64> = p.segments.iter().map(|s| s.arrival_time).collect();
        assert_eq!(arrivals, vec![0.0, 0.25, 0.25, 0.5, 0.5, 0.5, 0.5]);
        for s in &p.segments {
            let (lo, hi) = s.bounds();
            assert!(lo.iter().chain(hi.iter()).all(|v| v.abs() < 64.0));
        }
    }
}
