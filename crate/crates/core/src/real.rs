//! Floating-point abstraction shared by every generic numeric routine.
//!
//! Training runs in `f32`; gradient checks and oracles run the same code in `f64`.

use nalgebra::RealField;

pub trait Real: RealField + Copy + Default + Send + Sync + std::fmt::Debug + 'static {
    const ZERO: Self;
    const ONE: Self;
    /// Machine epsilon.
    const EPS: Self;

    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `max(x, 0)` that keeps NaN, unlike `RealField::max`.
    #[inline]
    fn relu(self) -> Self {
        if self < Self::ZERO {
            Self::ZERO
        } else {
            self
        }
    }

    #[inline]
    fn from_usize(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const EPS: Self = f32::EPSILON;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const EPS: Self = f64::EPSILON;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Converts a 3-vector between precisions.
pub fn cast3<A: Real, B: Real>(v: &nalgebra::Vector3<A>) -> nalgebra::Vector3<B> {
    nalgebra::Vector3::new(B::lit(v.x.to_f64()), B::lit(v.y.to_f64()), B::lit(v.z.to_f64()))
}
