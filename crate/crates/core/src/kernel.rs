//! Radiative Gaussian kernels: raw parameters, activations and point evaluation.
//!
//! Each kernel owns a raw position `p̃`, an unnormalized quaternion `r̃` and a raw
//! scale `s̃`. Activation maps them to a center, a unit rotation and a scale
//! strictly inside `(s_min, s_max)`, from which the covariance
//! `Σ = R S Sᵀ Rᵀ` and its closed-form inverse `R S⁻² Rᵀ` follow.

use nalgebra::{Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::real::Real;

/// Minimum quaternion norm accepted before normalization.
pub const MIN_QUATERNION_NORM: f64 = 1e-12;

/// Lower and upper scale bounds of the bounded scaling activation, in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleBounds {
    s_min: f64,
    s_max: f64,
}

impl ScaleBounds {
    pub fn new(s_min: f64, s_max: f64) -> Result<Self> {
        if !(s_min.is_finite() && s_max.is_finite() && s_min > 0.0 && s_min < s_max) {
            return Err(invalid(format!(
                "scale bounds need 0 < s_min < s_max, got ({s_min}, {s_max})"
            )));
        }
        Ok(Self { s_min, s_max })
    }

    /// `0.1×` and `10×` the voxel spacing.
    pub fn from_voxel_spacing(spacing: f64) -> Result<Self> {
        Self::new(0.1 * spacing, 10.0 * spacing)
    }

    pub fn s_min(&self) -> f64 {
        self.s_min
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn range(&self) -> f64 {
        self.s_max - self.s_min
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
fn activate_component<T: Real>(raw: T, bounds: &ScaleBounds) -> T {
    let lo = T::lit(bounds.s_min);
    let hi = T::lit(bounds.s_max);
    let s = T::lit(bounds.range()) * sigmoid(raw) + lo;
    // Saturated sigmoids round onto the bounds; keep the open interval.
    let margin = T::lit(2.0) * T::EPS * hi;
    s.max(lo + margin).min(hi - margin)
}

/// Bounded scaling activation `(s_max − s_min)·sigmoid(raw) + s_min`, componentwise.
pub fn activate_scale<T: Real>(raw: &Vector3<T>, bounds: &ScaleBounds) -> Vector3<T> {
    raw.map(|r| activate_component(r, bounds))
}

/// Derivative of [`activate_scale`] with respect to each raw component.
pub fn activate_scale_derivative<T: Real>(raw: &Vector3<T>, bounds: &ScaleBounds) -> Vector3<T> {
    let range = T::lit(bounds.range());
    raw.map(|r| {
        let s = sigmoid(r);
        range * s * (T::ONE - s)
    })
}

/// Inverse of [`activate_scale`]. Inputs are first clamped to `1e-4` of the
/// range away from each bound so the logit stays finite.
pub fn invert_scale_activation<T: Real>(s: &Vector3<T>, bounds: &ScaleBounds) -> Result<Vector3<T>> {
    let range = bounds.range();
    let lo = bounds.s_min + 1e-4 * range;
    let hi = bounds.s_max - 1e-4 * range;
    let mut out = Vector3::zeros();
    for k in 0..3 {
        let v = s[k].to_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("scale component {k} = {v}")));
        }
        let y = (v.clamp(lo, hi) - bounds.s_min) / range;
        out[k] = T::lit((y / (1.0 - y)).ln());
    }
    Ok(out)
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quaternion_to_rotation<T: Real>(r: &Vector4<T>) -> Result<Matrix3<T>> {
    let norm = r.norm();
    if !(norm.to_f64() >= MIN_QUATERNION_NORM) {
        return Err(invalid(format!("quaternion norm {} is degenerate", norm.to_f64())));
    }
    Ok(rotation_from_unit(&(r / norm)))
}

#[inline]
pub(crate) fn rotation_from_unit<T: Real>(q: &Vector4<T>) -> Matrix3<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let one = T::ONE;
    let two = T::lit(2.0);
    Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )
}

/// Optimizable parameters of one kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawKernelParams<T: Real> {
    pub position: Vector3<T>,
    /// `(w, x, y, z)`, not necessarily unit length.
    pub rotation: Vector4<T>,
    pub scale: Vector3<T>,
}

impl<T: Real> RawKernelParams<T> {
    pub fn new(position: Vector3<T>, rotation: Vector4<T>, scale: Vector3<T>) -> Result<Self> {
        if !(rotation.norm().to_f64() >= MIN_QUATERNION_NORM) {
            return Err(invalid("raw rotation has zero norm"));
        }
        Ok(Self {
            position,
            rotation,
            scale,
        })
    }

    pub fn identity_rotation() -> Vector4<T> {
        Vector4::new(T::ONE, T::ZERO, T::ZERO, T::ZERO)
    }

    pub fn cast<U: Real>(&self) -> RawKernelParams<U> {
        RawKernelParams {
            position: self.position.map(|v| U::lit(v.to_f64())),
            rotation: self.rotation.map(|v| U::lit(v.to_f64())),
            scale: self.scale.map(|v| U::lit(v.to_f64())),
        }
    }
}

/// A kernel after activation, with its covariance and precision.
#[derive(Debug, Clone, Copy)]
pub struct ActivatedKernel<T: Real> {
    pub position: Vector3<T>,
    pub rotation: Vector4<T>,
    pub scale: Vector3<T>,
    pub rotation_matrix: Matrix3<T>,
    pub covariance: Matrix3<T>,
    pub precision: Matrix3<T>,
    /// `‖r̃‖`, needed to back-propagate through normalization.
    pub(crate) raw_rotation_norm: T,
    /// `ds/ds̃` per component.
    pub(crate) scale_slope: Vector3<T>,
}

impl<T: Real> ActivatedKernel<T> {
    pub fn from_raw(raw: &RawKernelParams<T>, bounds: &ScaleBounds) -> Result<Self> {
        let scale = activate_scale(&raw.scale, bounds);
        let slope = activate_scale_derivative(&raw.scale, bounds);
        Self::build(raw.position, &raw.rotation, scale, slope)
    }

    /// Builds a kernel directly from activated geometry (no raw scale behind it).
    pub fn from_geometry(position: Vector3<T>, rotation: Vector4<T>, scale: Vector3<T>) -> Result<Self> {
        if scale.iter().any(|s| !(s.to_f64() > 0.0)) {
            return Err(invalid("kernel scale must be positive"));
        }
        Self::build(position, &rotation, scale, Vector3::repeat(T::ONE))
    }

    fn build(
        position: Vector3<T>,
        raw_rotation: &Vector4<T>,
        scale: Vector3<T>,
        scale_slope: Vector3<T>,
    ) -> Result<Self> {
        let norm = raw_rotation.norm();
        if !(norm.to_f64() >= MIN_QUATERNION_NORM) {
            return Err(invalid("raw rotation has zero norm"));
        }
        let rotation = raw_rotation / norm;
        let r = rotation_from_unit(&rotation);
        let s2 = scale.component_mul(&scale);
        let covariance = r * Matrix3::from_diagonal(&s2) * r.transpose();
        let precision = r * Matrix3::from_diagonal(&s2.map(|v| T::ONE / v)) * r.transpose();
        Ok(Self {
            position,
            rotation,
            scale,
            rotation_matrix: r,
            covariance,
            precision,
            raw_rotation_norm: norm,
            scale_slope,
        })
    }

    pub fn max_scale(&self) -> T {
        self.scale.x.max(self.scale.y).max(self.scale.z)
    }

    pub fn min_scale(&self) -> T {
        self.scale.x.min(self.scale.y).min(self.scale.z)
    }
}

/// `rho · exp(−½ (x − p)ᵀ Σ⁻¹ (x − p))`.
#[inline]
pub fn kernel_response<T: Real>(kernel: &ActivatedKernel<T>, rho: T, x: &Vector3<T>) -> T {
    let d = x - kernel.position;
    let e = d.dot(&(kernel.precision * d));
    rho * (T::lit(-0.5) * e).exp()
}

/// Sum of kernel responses at `x`, accumulated in index order.
pub fn field_attenuation<T: Real>(kernels: &[ActivatedKernel<T>], rho: &[T], x: &Vector3<T>) -> Result<T> {
    if kernels.len() != rho.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} kernels but {} amplitudes",
            kernels.len(),
            rho.len()
        )));
    }
    Ok(kernels
        .iter()
        .zip(rho)
        .fold(T::ZERO, |acc, (k, &r)| acc + kernel_response(k, r, x)))
}

/// Running mean of a per-kernel statistic between adaptive-control steps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub sum: f64,
    pub count: u64,
}

impl Accumulator {
    pub fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Row-level edit of a kernel population: kept rows in order, then appended rows.
#[derive(Debug, Clone)]
pub struct KernelEdit<T: Real> {
    pub keep: Vec<bool>,
    pub appended: Vec<RawKernelParams<T>>,
}

impl<T: Real> KernelEdit<T> {
    pub fn identity(len: usize) -> Self {
        Self {
            keep: vec![true; len],
            appended: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.appended.is_empty() && self.keep.iter().all(|&k| k)
    }

    pub fn output_len(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count() + self.appended.len()
    }

    /// Applies the edit to per-kernel rows of width `stride`; appended rows get `fill`.
    pub fn apply_rows<V: Clone>(&self, data: &[V], stride: usize, fill: V) -> Vec<V> {
        debug_assert_eq!(data.len(), self.keep.len() * stride);
        let mut out = Vec::with_capacity(self.output_len() * stride);
        for (row, &keep) in data.chunks_exact(stride).zip(&self.keep) {
            if keep {
                out.extend_from_slice(row);
            }
        }
        out.resize(self.output_len() * stride, fill);
        out
    }
}

/// The optimizable kernel population, stored as flat per-group arrays.
#[derive(Debug, Clone)]
pub struct KernelSet<T: Real> {
    bounds: ScaleBounds,
    positions: Vec<T>,
    rotations: Vec<T>,
    scales: Vec<T>,
    rho_acc: Vec<Accumulator>,
    grad_acc: Vec<Accumulator>,
}

impl<T: Real> KernelSet<T> {
    pub fn new(bounds: ScaleBounds) -> Self {
        Self {
            bounds,
            positions: Vec::new(),
            rotations: Vec::new(),
            scales: Vec::new(),
            rho_acc: Vec::new(),
            grad_acc: Vec::new(),
        }
    }

    pub fn from_params(bounds: ScaleBounds, params: impl IntoIterator<Item = RawKernelParams<T>>) -> Result<Self> {
        let mut set = Self::new(bounds);
        for p in params {
            set.push(p)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, raw: RawKernelParams<T>) -> Result<()> {
        if !(raw.rotation.norm().to_f64() >= MIN_QUATERNION_NORM) {
            return Err(invalid("raw rotation has zero norm"));
        }
        self.positions.extend_from_slice(raw.position.as_slice());
        self.rotations.extend_from_slice(raw.rotation.as_slice());
        self.scales.extend_from_slice(raw.scale.as_slice());
        self.rho_acc.push(Accumulator::default());
        self.grad_acc.push(Accumulator::default());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rho_acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> &ScaleBounds {
        &self.bounds
    }

    pub fn raw(&self, i: usize) -> RawKernelParams<T> {
        RawKernelParams {
            position: Vector3::from_column_slice(&self.positions[3 * i..3 * i + 3]),
            rotation: Vector4::from_column_slice(&self.rotations[4 * i..4 * i + 4]),
            scale: Vector3::from_column_slice(&self.scales[3 * i..3 * i + 3]),
        }
    }

    pub fn iter_raw(&self) -> impl Iterator<Item = RawKernelParams<T>> + '_ {
        (0..self.len()).map(|i| self.raw(i))
    }

    pub fn position(&self, i: usize) -> Vector3<T> {
        Vector3::from_column_slice(&self.positions[3 * i..3 * i + 3])
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }

    pub fn rotations(&self) -> &[T] {
        &self.rotations
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    /// Mutable views of the position, rotation and scale groups.
    pub fn groups_mut(&mut self) -> (&mut [T], &mut [T], &mut [T]) {
        (&mut self.positions, &mut self.rotations, &mut self.scales)
    }

    pub fn activate(&self, i: usize) -> Result<ActivatedKernel<T>> {
        ActivatedKernel::from_raw(&self.raw(i), &self.bounds)
    }

    pub fn activate_all(&self) -> Result<Vec<ActivatedKernel<T>>> {
        (0..self.len()).into_par_iter().map(|i| self.activate(i)).collect()
    }

    pub fn field_attenuation(&self, rho: &[T], x: &Vector3<T>) -> Result<T> {
        field_attenuation(&self.activate_all()?, rho, x)
    }

    pub fn rho_accumulators(&self) -> &[Accumulator] {
        &self.rho_acc
    }

    pub fn grad_accumulators(&self) -> &[Accumulator] {
        &self.grad_acc
    }

    pub fn accumulate_rho(&mut self, rho: &[T]) -> Result<()> {
        if rho.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} amplitudes for {} kernels",
                rho.len(),
                self.len()
            )));
        }
        for (acc, r) in self.rho_acc.iter_mut().zip(rho) {
            acc.add(r.to_f64());
        }
        Ok(())
    }

    pub fn accumulate_grad(&mut self, i: usize, value: f64) {
        self.grad_acc[i].add(value);
    }

    pub fn set_rho_accumulator(&mut self, i: usize, acc: Accumulator) {
        self.rho_acc[i] = acc;
    }

    pub fn set_grad_accumulator(&mut self, i: usize, acc: Accumulator) {
        self.grad_acc[i] = acc;
    }

    pub fn reset_accumulators(&mut self) {
        self.rho_acc.fill(Accumulator::default());
        self.grad_acc.fill(Accumulator::default());
    }

    /// Applies a densify/prune edit. Appended kernels start with empty accumulators.
    pub fn apply_edit(&mut self, edit: &KernelEdit<T>) -> Result<()> {
        if edit.keep.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "edit covers {} kernels, set has {}",
                edit.keep.len(),
                self.len()
            )));
        }
        if let Some(bad) = edit
            .appended
            .iter()
            .find(|p| !(p.rotation.norm().to_f64() >= MIN_QUATERNION_NORM))
        {
            return Err(invalid(format!("appended kernel has degenerate rotation {:?}", bad.rotation)));
        }
        let kept = self.len() - edit.keep.iter().filter(|&&k| !k).count();
        let mut positions = edit.apply_rows(&self.positions, 3, T::ZERO);
        let mut rotations = edit.apply_rows(&self.rotations, 4, T::ZERO);
        let mut scales = edit.apply_rows(&self.scales, 3, T::ZERO);
        for (j, p) in edit.appended.iter().enumerate() {
            let i = kept + j;
            positions[3 * i..3 * i + 3].copy_from_slice(p.position.as_slice());
            rotations[4 * i..4 * i + 4].copy_from_slice(p.rotation.as_slice());
            scales[3 * i..3 * i + 3].copy_from_slice(p.scale.as_slice());
        }
        self.positions = positions;
        self.rotations = rotations;
        self.scales = scales;
        self.rho_acc = edit.apply_rows(&self.rho_acc, 1, Accumulator::default());
        self.grad_acc = edit.apply_rows(&self.grad_acc, 1, Accumulator::default());
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> KernelSet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64())).collect::<Vec<U>>();
        KernelSet {
            bounds: self.bounds,
            positions: conv(&self.positions),
            rotations: conv(&self.rotations),
            scales: conv(&self.scales),
            rho_acc: self.rho_acc.clone(),
            grad_acc: self.grad_acc.clone(),
        }
    }
}
