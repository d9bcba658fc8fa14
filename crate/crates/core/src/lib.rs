//! Sparse-view dynamic vessel reconstruction with radiative Gaussian kernels
//! and a hash-encoded attenuation field.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dnaf;
pub mod error;
pub mod fdk;
pub mod geometry;
pub mod io;
pub mod kernel;
pub mod loss;
mod mc_tables;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod raster;
pub mod real;
pub mod spatial;
pub mod train;
pub mod volume;
pub mod voxelize;

pub use checkpoint::{load_checkpoint, save_checkpoint, Model};
pub use dataset::ProjectionDataset;
pub use dnaf::{hash_encode, DnafCache, DnafConfig, DnafGradients, DnafModel, HashEncodingConfig};
pub use error::{Error, Result};
pub use fdk::{fdk_reconstruct, sample_initial_kernels, InitConfig};
pub use geometry::{frame_timestamps, held_out_views, subsample_views, FramePose, FrameSpec, Ray, ScanGeometry, Spin};
pub use kernel::{
    activate_scale, field_attenuation, invert_scale_activation, kernel_response, quaternion_to_rotation, ActivatedKernel, KernelEdit, KernelSet,
    RawKernelParams, ScaleBounds,
};
pub use loss::{compute_loss, ssim, LossValue};
pub use metrics::{eval_images, psnr, EvalReport, FrameMetrics};
pub use optim::{exponential_lr, AdamGroup};
pub use phantom::{ground_truth_volume, oracle_project, phantom_attenuation, synthesize_dsa_dataset, PointField, SynthesisConfig, VesselPhantom};
pub use raster::{ray_integral, ray_integral_with_grad, splat_backward, splat_forward, KernelGrad, RasterConfig, RasterGradients, SplatImage};
pub use real::Real;
pub use volume::{AttenuationVolume, GridSpec};
pub use train::{accumulate_and_prune, densify, instantaneous_keep_mask, loss_and_gradients, perturb_timestamp, train, LogRecord, TrainConfig, TrainOutput, TrainOutputs};
pub use mesh::{chamfer_hausdorff, marching_cubes, TriangleMesh};
pub use voxelize::{average_volume, voxelize};
pub use pipeline::{default_phantom_dataset, evaluate_model, evaluate_volume, initialize_model, render, run_experiment, ExperimentConfig, ExperimentResult};
