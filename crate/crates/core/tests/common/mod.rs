#![allow(dead_code)]

pub mod blob;

use nalgebra::{Vector3, Vector4};
use radsplat::{DnafConfig, DnafModel, KernelSet, Model, RawKernelParams, ScaleBounds};
use rand::Rng;

/// Kernels with random positions in `±half_width`, rotations and scales.
pub fn random_kernels<R: Rng>(rng: &mut R, n: usize, bounds: ScaleBounds, half_width: f64, scale: (f64, f64)) -> KernelSet<f64> {
    let mut set = KernelSet::new(bounds);
    for _ in 0..n {
        let p = Vector3::from_fn(|_, _| rng.gen_range(-half_width..half_width));
        let q = Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0)) + Vector4::new(0.5, 0.0, 0.0, 0.0);
        let s = Vector3::from_fn(|_, _| rng.gen_range(scale.0..scale.1));
        let raw = radsplat::invert_scale_activation(&s, &bounds).unwrap();
        set.push(RawKernelParams::new(p, q, raw).unwrap()).unwrap();
    }
    set
}

/// A small network over `±half_extent`; `time_amplitude` widens the
/// space-time table so the output depends visibly on `t`.
pub fn small_dnaf(half_extent: f64, seed: u64, time_amplitude: f64) -> DnafModel<f64> {
    let mut c = DnafConfig::new(Vector3::repeat(-half_extent), Vector3::repeat(half_extent)).with_table_size(1 << 10);
    c.encoding_3d.levels = 4;
    c.encoding_4d.levels = 4;
    c.hidden = 16;
    c.output_bias = 0.05;
    c.seed = seed;
    let mut m = DnafModel::new(c).unwrap();
    if time_amplitude > 0.0 {
        let l = m.layout;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x5eed);
        for v in &mut m.params[l.table_4d..l.w1] {
            *v = rng.gen_range(-time_amplitude..time_amplitude);
        }
    }
    m
}

pub fn small_model<R: Rng>(rng: &mut R, n: usize, half_width: f64, seed: u64) -> Model<f64> {
    let bounds = ScaleBounds::new(0.2, 20.0).unwrap();
    Model {
        kernels: random_kernels(rng, n, bounds, half_width, (1.0, 4.0)),
        dnaf: small_dnaf(2.0 * half_width, seed, 0.5),
    }
}
