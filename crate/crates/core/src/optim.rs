//! Adam over flat parameter groups, and the exponential learning-rate schedule.

use crate::error::{Error, Result};
use crate::kernel::KernelEdit;
use crate::real::Real;

/// `lr₀ · 0.1^(i / iterations)`: decays to a tenth of the initial rate at the end.
pub fn exponential_lr(lr0: f64, iteration: usize, iterations: usize) -> f64 {
    if iterations == 0 {
        return lr0;
    }
    lr0 * 0.1f64.powf(iteration as f64 / iterations as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamGroup<T: Real> {
    pub name: &'static str,
    /// Values per kernel row, for diagnostics and row edits.
    pub stride: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamGroup<T> {
    pub fn new(name: &'static str, stride: usize, len: usize) -> Self {
        Self {
            name,
            stride: stride.max(1),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::ZERO; len],
            v: vec![T::ZERO; len],
            step: 0,
        }
    }

    /// One bias-corrected Adam update with decoupled weight decay.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "group {}: {} params, {} grads, {} moments",
                self.name,
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                group: self.name,
                kernel: i / self.stride,
            });
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = g.to_f64();
            let mn = b1 * m.to_f64() + (1.0 - b1) * g;
            let vn = b2 * v.to_f64() + (1.0 - b2) * g * g;
            *m = T::lit(mn);
            *v = T::lit(vn);
            let mut x = p.to_f64();
            if weight_decay != 0.0 {
                x -= lr * weight_decay * x;
            }
            x -= lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
            *p = T::lit(x);
        }
        Ok(())
    }

    /// Keeps moments of surviving rows; appended rows start at zero.
    pub fn apply_edit(&mut self, edit: &KernelEdit<T>) -> Result<()> {
        if edit.keep.len() * self.stride != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "group {} has {} rows, edit covers {}",
                self.name,
                self.m.len() / self.stride,
                edit.keep.len()
            )));
        }
        self.m = edit.apply_rows(&self.m, self.stride, T::ZERO);
        self.v = edit.apply_rows(&self.v, self.stride, T::ZERO);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_no_change() {
        let mut g = AdamGroup::<f64>::new("x", 1, 3);
        let mut p = vec![1.0, -2.0, 3.0];
        g.step(&mut p, &[0.0; 3], 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_is_lr() {
        let mut g = AdamGroup::<f64>::new("x", 1, 1);
        let mut p = vec![0.5];
        g.step(&mut p, &[1.0], 0.1, 0.0).unwrap();
        assert_relative_eq!(p[0], 0.4, epsilon = 1e-8);
    }

    #[test]
    fn nan_names_the_kernel() {
        let mut g = AdamGroup::<f32>::new("rotation", 4, 12);
        let mut p = vec![0.0; 12];
        let mut grads = vec![0.0; 12];
        grads[9] = f32::NAN;
        match g.step(&mut p, &grads, 0.1, 0.0) {
            Err(Error::NonFiniteGradient { group, kernel }) => assert_eq!((group, kernel), ("rotation", 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        assert_eq!(exponential_lr(0.01, 0, 100), 0.01);
        assert_relative_eq!(exponential_lr(0.01, 100, 100), 0.001, epsilon = 1e-12);
        assert!((1..=100).all(|i| exponential_lr(1.0, i, 100) < exponential_lr(1.0, i - 1, 100)));
    }

    #[test]
    fn edit_keeps_rows() {
        let mut g = AdamGroup::<f64>::new("p", 2, 6);
        g.m = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        g.v = g.m.clone();
        let edit = KernelEdit {
            keep: vec![true, false, true],
            appended: vec![crate::kernel::RawKernelParams::new(
                nalgebra::Vector3::zeros(),
                nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0),
                nalgebra::Vector3::zeros(),
            )
            .unwrap()],
        };
        g.apply_edit(&edit).unwrap();
        assert_eq!(g.m, vec![1.0, 2.0, 5.0, 6.0, 0.0, 0.0]);
    }
}
