//! End-to-end experiment: synthesize, initialize from FDK, train, evaluate, mesh.

use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;

use crate::checkpoint::Model;
use crate::config::KeyValues;
use crate::dataset::ProjectionDataset;
use crate::dnaf::{DnafConfig, DnafModel};
use crate::error::{invalid, Result};
use crate::fdk::{fdk_reconstruct, sample_initial_kernels, InitConfig};
use crate::geometry::{frame_timestamps, held_out_views, subsample_views, FrameSpec, ScanGeometry};
use crate::kernel::ScaleBounds;
use crate::mesh::{chamfer_hausdorff, marching_cubes, TriangleMesh, GT_ISO, RECON_ISO};
use crate::metrics::{eval_images, EvalReport};
use crate::phantom::{ground_truth_volume, synthesize_dsa_dataset, SynthesisConfig, VesselPhantom};
use crate::raster::{splat_forward, RasterConfig};
use crate::real::Real;
use crate::train::{train, TrainConfig, TrainOutput, TrainOutputs};
use crate::volume::{project_volume, AttenuationVolume, GridSpec};
use crate::voxelize::average_volume;

/// Densification stops growing the set here, which keeps a 10k-iteration
/// run on one core within tens of minutes.
pub const DESK_MAX_KERNELS: usize = 10_000;

/// Settings outside the optimizer: grid, initialization and network size.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train_views: usize,
    /// Voxels per axis of the reconstruction grid.
    pub grid_size: usize,
    /// Edge of the cubic reconstruction grid, mm.
    pub grid_extent: f64,
    /// Initial kernel count `M`.
    pub kernels: usize,
    /// FDK threshold for initial kernel candidates.
    pub delta: f64,
    pub table_size: usize,
    pub hidden: usize,
    pub recon_iso: f64,
    pub gt_iso: f64,
    pub mesh_samples: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let grid_extent = 128.0;
        Self {
            train_views: 30,
            grid_size: 64,
            grid_extent,
            kernels: 4000,
            delta: 0.016,
            table_size: 1 << 15,
            hidden: 64,
            recon_iso: RECON_ISO,
            gt_iso: GT_ISO,
            mesh_samples: 100_000,
            seed: 0,
            train: TrainConfig {
                position_lr_scale: 0.5 * grid_extent,
                max_kernels: DESK_MAX_KERNELS,
                ..TrainConfig::fast()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::centered_cube(self.grid_size, self.grid_extent)
    }

    /// Parses experiment keys; the remaining keys configure training, and
    /// unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = Self::default();
        macro_rules! field {
            ($($name:ident),*) => {
                $(if let Some(v) = kv.take(stringify!($name))? { c.$name = v; })*
            };
        }
        field!(train_views, grid_size, grid_extent, kernels, delta, table_size, hidden, recon_iso, gt_iso, mesh_samples, seed);
        c.train = TrainConfig {
            position_lr_scale: 0.5 * c.grid_extent,
            max_kernels: DESK_MAX_KERNELS,
            ..TrainConfig::fast()
        };
        c.train.apply_overrides(&mut kv)?;
        kv.finish()?;
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        format!(
            "train_views = {}\ngrid_size = {}\ngrid_extent = {}\nkernels = {}\ndelta = {}\ntable_size = {}\nhidden = {}\n\
             recon_iso = {}\ngt_iso = {}\nmesh_samples = {}\nseed = {}\n{}",
            self.train_views,
            self.grid_size,
            self.grid_extent,
            self.kernels,
            self.delta,
            self.table_size,
            self.hidden,
            self.recon_iso,
            self.gt_iso,
            self.mesh_samples,
            self.seed,
            self.train
                .to_text()
                .lines()
                .filter(|l| !l.starts_with("seed"))
                .map(|l| format!("{l}\n"))
                .collect::<String>()
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.kernels == 0 || self.train_views == 0 || self.mesh_samples == 0 || self.hidden == 0 {
            return Err(invalid("kernels, train_views, hidden and mesh_samples must be positive"));
        }
        self.train.validate()
    }
}

/// The default phantom scanned with the default geometry, plus its
/// time-averaged ground-truth volume on `grid`.
pub fn default_phantom_dataset(geometry: &ScanGeometry, grid: GridSpec, synthesis: &SynthesisConfig) -> Result<ProjectionDataset> {
    let phantom = VesselPhantom::default_tree();
    let mut ds = synthesize_dsa_dataset(&phantom, geometry, synthesis)?;
    ds.ground_truth = Some(ground_truth_volume(&phantom, geometry, grid)?);
    Ok(ds)
}

/// Renders the model at an arbitrary angle and time.
pub fn render<T: Real>(model: &Model<T>, geometry: &ScanGeometry, frame: &FrameSpec, raster: &RasterConfig) -> Result<Vec<f32>> {
    let m = model.kernels.len();
    let positions: Vec<Vector3<T>> = (0..m).map(|i| model.kernels.position(i)).collect();
    let (rho, _) = model.dnaf.forward_batch(&positions, &vec![T::lit(frame.timestamp); m])?;
    let kernels = model.kernels.activate_all()?;
    let img = splat_forward(&kernels, &rho, geometry, frame, raster)?;
    Ok(img.values.iter().map(|v| v.to_f64() as f32).collect())
}

/// FDK volume from the training frames, kernels sampled from it, and a
/// network whose output bias matches the training images in least squares.
pub fn initialize_model(train_set: &ProjectionDataset, cfg: &ExperimentConfig) -> Result<(AttenuationVolume, Model<f32>)> {
    let grid = cfg.grid()?;
    let fdk = fdk_reconstruct(train_set, grid)?;
    let bounds = ScaleBounds::from_voxel_spacing(grid.spacing)?;
    let kernels = sample_initial_kernels::<f32>(
        &fdk,
        &InitConfig {
            count: cfg.kernels,
            delta: cfg.delta,
            bounds,
            seed: cfg.seed,
        },
    )?;
    let mut dc = DnafConfig::new(grid.lower(), grid.upper()).with_table_size(cfg.table_size);
    dc.hidden = cfg.hidden;
    dc.seed = cfg.seed;
    dc.output_bias = calibrate_amplitude(&kernels, train_set)?;
    let dnaf = DnafModel::new(dc)?;
    Ok((fdk, Model { kernels, dnaf }))
}

/// `argmin_ρ Σ (ρ·render₁ − target)²` over a few training frames, where
/// `render₁` renders every kernel with unit amplitude.
fn calibrate_amplitude(kernels: &crate::kernel::KernelSet<f32>, train_set: &ProjectionDataset) -> Result<f64> {
    let act = kernels.activate_all()?;
    let ones = vec![1.0f32; act.len()];
    let step = (train_set.len() / 4).max(1);
    let (mut num, mut den) = (0.0, 0.0);
    for pos in (0..train_set.len()).step_by(step) {
        let img = splat_forward(&act, &ones, &train_set.geometry, &train_set.frames[pos], &RasterConfig::default())?;
        for (r, t) in img.values.iter().zip(&train_set.images[pos]) {
            num += *r as f64 * *t as f64;
            den += *r as f64 * *r as f64;
        }
    }
    if !(den > 0.0) {
        return Err(invalid("initial kernels do not cover any detector pixel"));
    }
    Ok((num / den).max(1e-4))
}

/// Held-out metrics of model renders against the full dataset.
pub fn evaluate_model<T: Real>(model: &Model<T>, full: &ProjectionDataset, test_indices: &[usize]) -> Result<EvalReport> {
    let renders: Vec<(usize, Vec<f32>)> = test_indices
        .iter()
        .map(|&j| {
            let pos = full.position_of(j).ok_or_else(|| invalid(format!("frame {j} not in dataset")))?;
            Ok((j, render(model, &full.geometry, &full.frames[pos], &RasterConfig::default())?))
        })
        .collect::<Result<_>>()?;
    compare(full, &renders)
}

/// Held-out metrics of FDK reprojections against the full dataset.
pub fn evaluate_volume(volume: &AttenuationVolume, full: &ProjectionDataset, test_indices: &[usize]) -> Result<EvalReport> {
    let step = 0.5 * volume.grid.spacing;
    let renders: Vec<(usize, Vec<f32>)> = test_indices
        .iter()
        .map(|&j| {
            let pos = full.position_of(j).ok_or_else(|| invalid(format!("frame {j} not in dataset")))?;
            Ok((j, project_volume(volume, &full.geometry, &full.frames[pos], step)?))
        })
        .collect::<Result<_>>()?;
    compare(full, &renders)
}

fn compare(full: &ProjectionDataset, renders: &[(usize, Vec<f32>)]) -> Result<EvalReport> {
    let pairs: Vec<(usize, &[f32], &[f32])> = renders
        .iter()
        .map(|(j, img)| {
            let pos = full.position_of(*j).expect("checked above");
            (*j, img.as_slice(), full.images[pos].as_slice())
        })
        .collect();
    eval_images(&pairs, full.geometry.rows, full.geometry.cols)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub model: Model<f32>,
    pub fdk: AttenuationVolume,
    pub recon_volume: AttenuationVolume,
    pub recon_mesh: TriangleMesh,
    pub gt_mesh: TriangleMesh,
    pub test_report: EvalReport,
    pub fdk_report: EvalReport,
    pub chamfer_mm: f64,
    pub hausdorff_mm: f64,
    pub train_seconds: f64,
    pub total_seconds: f64,
    pub losses: Vec<f64>,
    pub kernel_counts: Vec<usize>,
}

/// Full run on a dataset that carries its ground-truth volume.
pub fn run_experiment(full: &ProjectionDataset, cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    let start = Instant::now();
    cfg.validate()?;
    let gt = full
        .ground_truth
        .as_ref()
        .ok_or_else(|| invalid("dataset has no ground-truth volume"))?;
    let total = full.geometry.frames;
    let train_idx = subsample_views(total, cfg.train_views)?;
    let test_idx = held_out_views(total, cfg.train_views)?;
    let train_set = full.subset(&train_idx)?;

    let (fdk, model) = initialize_model(&train_set, cfg)?;
    let t0 = Instant::now();
    let outputs = match out_dir {
        Some(d) => TrainOutputs::to_dir(d),
        None => TrainOutputs::default(),
    };
    let TrainOutput {
        model,
        losses,
        kernel_counts,
        ..
    } = train(&train_set, model, &cfg.train, &outputs)?;
    let train_seconds = t0.elapsed().as_secs_f64();

    let test_report = evaluate_model(&model, full, &test_idx)?;
    let fdk_report = evaluate_volume(&fdk, full, &test_idx)?;
    let ts: Vec<f64> = frame_timestamps(&full.geometry)?.iter().map(|f| f.timestamp).collect();
    let recon_volume = average_volume(&model, &ts, cfg.grid()?)?;
    let recon_mesh = marching_cubes(&recon_volume, cfg.recon_iso)?;
    let gt_mesh = marching_cubes(gt, cfg.gt_iso)?;
    let (chamfer_mm, hausdorff_mm) = if recon_mesh.is_empty() {
        (f64::INFINITY, f64::INFINITY)
    } else {
        chamfer_hausdorff(&recon_mesh, &gt_mesh, cfg.mesh_samples, cfg.seed)?
    };
    if let Some(d) = out_dir {
        write_artifacts(d, &fdk, &recon_volume, &recon_mesh, &gt_mesh, &test_report, &fdk_report)?;
    }
    Ok(ExperimentResult {
        model,
        fdk,
        recon_volume,
        recon_mesh,
        gt_mesh,
        test_report,
        fdk_report,
        chamfer_mm,
        hausdorff_mm,
        train_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
        losses: losses.iter().map(|l| l.loss).collect(),
        kernel_counts,
    })
}

fn write_artifacts(
    dir: &Path,
    fdk: &AttenuationVolume,
    recon: &AttenuationVolume,
    recon_mesh: &TriangleMesh,
    gt_mesh: &TriangleMesh,
    test: &EvalReport,
    fdk_report: &EvalReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    fdk.save(&dir.join("fdk"))?;
    recon.save(&dir.join("recon_mean"))?;
    recon_mesh.save_obj(&dir.join("recon.obj"))?;
    gt_mesh.save_obj(&dir.join("gt.obj"))?;
    std::fs::write(dir.join("metrics.csv"), test.to_csv())?;
    std::fs::write(dir.join("fdk_metrics.csv"), fdk_report.to_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_config_round_trip() {
        let c = ExperimentConfig::parse("kernels = 100\nseed = 9\niterations = 50\ndensify_from = 10\ndensify_until = 40\n").unwrap();
        assert_eq!((c.kernels, c.seed, c.train.seed, c.train.iterations), (100, 9, 9, 50));
        assert_eq!(c.train.position_lr_scale, 64.0);
        assert!(ExperimentConfig::parse("iterations = 50").is_err());
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert!(ExperimentConfig::parse("nonsense = 1").is_err());
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }
}
