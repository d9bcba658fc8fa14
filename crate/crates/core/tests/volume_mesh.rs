mod common;

use nalgebra::Vector3;
use proptest::prelude::*;
use radsplat::mesh::{GT_ISO, RECON_ISO};
use radsplat::voxelize::voxelize_with_rho;
use radsplat::{average_volume, marching_cubes, voxelize, AttenuationVolume, GridSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn time_constant_network_average_equals_snapshot() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = common::small_model(&mut rng, 12, 5.0, 2);
    let l = model.dnaf.layout;
    model.dnaf.params[l.table_4d..l.w1].iter_mut().for_each(|v| *v = 0.0);
    let grid = GridSpec::centered_cube(10, 20.0).unwrap();
    let ts: Vec<f64> = (1..=7).map(|j| j as f64 / 7.0).collect();
    let avg = average_volume(&model, &ts, grid).unwrap();
    let snap = voxelize(&model, 0.3, grid).unwrap();
    for (a, b) in avg.values.iter().zip(&snap.values) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6));
    }
}

#[test]
fn two_frame_mean_with_empty_frame_is_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = common::small_model(&mut rng, 8, 5.0, 4);
    let grid = GridSpec::centered_cube(8, 20.0).unwrap();
    let rho: Vec<f64> = (0..8).map(|i| 0.01 * (i + 1) as f64).collect();
    let full = voxelize_with_rho(&model, &rho, grid).unwrap();
    let zero = voxelize_with_rho(&model, &[0.0; 8], grid).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
    let half: Vec<f64> = rho.iter().map(|r| r / 2.0).collect();
    let mean = voxelize_with_rho(&model, &half, grid).unwrap();
    for (m, f) in mean.values.iter().zip(&full.values) {
        assert!((m - f / 2.0).abs() <= 1e-7 * f.abs().max(1e-9));
    }
}

#[test]
fn default_iso_values() {
    assert_eq!(RECON_ISO, 0.008);
    assert_eq!(GT_ISO, 0.025);
}

#[test]
fn too_small_volume_is_rejected() {
    let v = AttenuationVolume::zeros(GridSpec::new([1, 4, 4], 1.0, Vector3::zeros()).unwrap());
    assert!(marching_cubes(&v, 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn meshes_are_well_formed(values in prop::collection::vec(0.0f32..1.0, 6 * 6 * 6), iso in 0.05f64..0.95) {
        let g = GridSpec::centered_cube(6, 6.0).unwrap();
        let v = AttenuationVolume::from_values(g, values).unwrap();
        let m = marching_cubes(&v, iso).unwrap();
        for t in 0..m.triangles.len() {
            prop_assert!(m.triangles[t].iter().all(|&i| (i as usize) < m.vertices.len()));
            prop_assert!(m.triangle_area(t) > 1e-12);
        }
        prop_assert!(m.vertices.iter().all(|p| p.iter().all(|c| c.is_finite())));
    }
}
