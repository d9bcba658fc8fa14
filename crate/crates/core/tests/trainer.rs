mod common;

use nalgebra::Vector3;
use proptest::prelude::*;
use radsplat::checkpoint::encode_checkpoint;
use radsplat::kernel::Accumulator;
use radsplat::train::TrainOutputs;
use radsplat::{
    accumulate_and_prune, exponential_lr, loss_and_gradients, RasterConfig, synthesize_dsa_dataset, train, Error, GridSpec, KernelSet, Model, ProjectionDataset, RawKernelParams, ScaleBounds,
    ScanGeometry, SynthesisConfig, TrainConfig, VesselPhantom,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_dataset() -> ProjectionDataset {
    let g = ScanGeometry {
        rows: 16,
        cols: 16,
        du: 8.0,
        dv: 8.0,
        frames: 12,
        ..ScanGeometry::default()
    };
    synthesize_dsa_dataset(&VesselPhantom::default_tree(), &g, &SynthesisConfig::default()).unwrap()
}

fn tiny_model() -> Model<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bounds = ScaleBounds::from_voxel_spacing(GridSpec::centered_cube(32, 128.0).unwrap().spacing).unwrap();
    Model {
        kernels: common::random_kernels(&mut rng, 60, bounds, 30.0, (3.0, 8.0)),
        dnaf: common::small_dnaf(64.0, 1, 0.0),
    }
    .cast()
}

fn config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        densify_from: 20,
        densify_until: 40,
        densify_interval: 10,
        log_interval: 10,
        checkpoint_interval: 25,
        position_lr_scale: 64.0,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_iterations_returns_input() {
    let ds = tiny_dataset();
    let m = tiny_model();
    let out = train(&ds, m.clone(), &TrainConfig { iterations: 0, ..TrainConfig::default() }, &TrainOutputs::default()).unwrap();
    assert_eq!(encode_checkpoint(&out.model), encode_checkpoint(&m));
    assert!(out.losses.is_empty());
}

#[test]
fn kernel_count_changes_only_in_window() {
    let ds = tiny_dataset();
    let out = train(&ds, tiny_model(), &config(60), &TrainOutputs::default()).unwrap();
    let c = &out.kernel_counts;
    assert!(c[..19].iter().all(|&n| n == 60));
    assert!(c[40..].iter().all(|&n| n == c[39]));
    assert!(out.losses.iter().all(|l| l.loss.is_finite()));
}

#[test]
fn writes_log_and_checkpoints() {
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&ds, tiny_model(), &config(50), &TrainOutputs::to_dir(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), out.log.len());
    assert_eq!(lines.iter().map(|v| v["iter"].as_u64().unwrap()).collect::<Vec<_>>(), vec![1, 10, 20, 30, 40, 50]);
    for key in ["loss", "l1", "dssim", "num_kernels", "lr_position", "lr_rotation", "lr_scale", "lr_dnaf"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert!(TrainOutputs::checkpoint_path(dir.path(), 25).exists());
    assert!(TrainOutputs::checkpoint_path(dir.path(), 50).exists());
    let fin = radsplat::load_checkpoint(&dir.path().join("final.bin")).unwrap();
    assert_eq!(encode_checkpoint(&fin), encode_checkpoint(&out.model));
}

#[test]
fn nan_loss_aborts_with_last_good_checkpoint() {
    let ds = tiny_dataset();
    let mut m = tiny_model();
    let b2 = m.dnaf.layout.b2;
    m.dnaf.params[b2] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        densify_from: 1,
        densify_until: 10,
        ..config(10)
    };
    match train(&ds, m, &cfg, &TrainOutputs::to_dir(dir.path())) {
        Err(Error::Diverged { iteration, checkpoint }) => {
            assert_eq!(iteration, 1);
            assert!(checkpoint.unwrap().exists());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.losses.len())),
    }
}

#[test]
fn detached_positions_get_only_geometric_gradient() {
    let ds = tiny_dataset();
    let m = tiny_model();
    let f = ds.frames[3];
    let run = |detach| loss_and_gradients(&m, &ds.geometry, &f, f.timestamp, &ds.images[3], 0.2, &RasterConfig::default(), detach).unwrap().1;
    let (attached, detached) = (run(false), run(true));
    assert_eq!(attached.rotation, detached.rotation);
    assert_eq!(attached.scale, detached.scale);
    assert_eq!(attached.dnaf, detached.dnaf);
    assert_ne!(attached.position, detached.position);
}

#[test]
fn schedule_hits_tenth() {
    for n in [1, 7, 10_000, 30_000] {
        assert!((exponential_lr(1e-3, n, n) - 1e-4).abs() <= 1e-9 * 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruning_keeps_means_at_or_above_epsilon(
        stats in prop::collection::vec((0.0f64..1e-5, 0u64..300), 1..40),
        eps in 1e-7f64..5e-6,
    ) {
        let bounds = ScaleBounds::new(0.2, 20.0).unwrap();
        let mut set = KernelSet::<f64>::new(bounds);
        for (i, &(mean, count)) in stats.iter().enumerate() {
            set.push(RawKernelParams::new(Vector3::new(i as f64, 0.0, 0.0), RawKernelParams::identity_rotation(), Vector3::zeros()).unwrap()).unwrap();
            set.set_rho_accumulator(i, Accumulator { sum: mean * count as f64, count });
        }
        let edit = accumulate_and_prune(&mut set, eps).unwrap();
        for (i, &(mean, count)) in stats.iter().enumerate() {
            let m = if count == 0 { None } else { Some(mean * count as f64 / count as f64) };
            match m {
                None => prop_assert!(edit.keep[i]),
                Some(m) => prop_assert_eq!(edit.keep[i], m >= eps),
            }
        }
        prop_assert!(set.rho_accumulators().iter().all(|a| a.count == 0));
    }
}
