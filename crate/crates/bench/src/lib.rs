//! Fixtures shared by the benchmarks.

use nalgebra::{Vector3, Vector4};
use radsplat::{invert_scale_activation, DnafConfig, DnafModel, KernelSet, Model, RawKernelParams, ScaleBounds, ScanGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `m` random kernels inside a 40 mm cube with 1–4 mm scales and a network
/// sized like the desk experiment.
pub fn fixture(m: usize) -> (Model<f32>, ScanGeometry) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bounds = ScaleBounds::from_voxel_spacing(2.0).unwrap();
    let mut kernels = KernelSet::new(bounds);
    for _ in 0..m {
        let p = Vector3::from_fn(|_, _| rng.gen_range(-20.0..20.0));
        let q = Vector4::new(1.0, rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
        let s = invert_scale_activation(&Vector3::from_fn(|_, _| rng.gen_range(1.0..4.0)), &bounds).unwrap();
        kernels.push(RawKernelParams::new(p, q, s).unwrap().cast()).unwrap();
    }
    let mut c = DnafConfig::new(Vector3::repeat(-64.0), Vector3::repeat(64.0)).with_table_size(1 << 15);
    c.output_bias = 0.02;
    (
        Model {
            kernels,
            dnaf: DnafModel::new(c).unwrap(),
        },
        ScanGeometry::default(),
    )
}
