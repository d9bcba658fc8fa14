use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use radsplat::config::KeyValues;
use radsplat::mesh::TriangleMesh;
use radsplat::pipeline::{evaluate_model, evaluate_volume, initialize_model, render};
use radsplat::train::TrainOutputs;
use radsplat::{
    average_volume, chamfer_hausdorff, fdk_reconstruct, frame_timestamps, held_out_views, load_checkpoint, marching_cubes, subsample_views, train,
    voxelize, AttenuationVolume, ExperimentConfig, FrameSpec, GridSpec, ProjectionDataset, RasterConfig, ScanGeometry, SynthesisConfig,
};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "radsplat", version, about = "Sparse-view dynamic vessel reconstruction with radiative Gaussian kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for every output.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a DSA dataset from the default vessel phantom.
    Phantom {
        #[command(flatten)]
        common: Common,
    },
    /// FDK reconstruction from the training views.
    Fdk {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Use every frame instead of the configured training subset.
        #[arg(long)]
        all_views: bool,
    },
    /// Initialize from FDK and optimize kernels and network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Render a DSA image at an arbitrary angle and time.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset supplying the scan geometry.
        #[arg(long)]
        dataset: PathBuf,
        /// Render this dataset frame's angle and timestamp.
        #[arg(long, conflicts_with_all = ["angle", "time"])]
        frame: Option<usize>,
        #[arg(long, requires = "time")]
        angle: Option<f64>,
        #[arg(long, requires = "angle")]
        time: Option<f64>,
    },
    /// Sample the attenuation field on the configured grid.
    Voxelize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose frame timestamps are averaged when --time is absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        time: Option<f64>,
    },
    /// Extract an iso-surface and optionally compare it with a reference mesh.
    Mesh {
        #[command(flatten)]
        common: Common,
        /// Volume base path (`<base>.f32` + `<base>.txt`).
        #[arg(long)]
        volume: PathBuf,
        /// Defaults to the configured reconstruction iso value.
        #[arg(long)]
        iso: Option<f64>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// PSNR/SSIM of a checkpoint or volume against dataset frames.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, required_unless_present = "volume", conflicts_with = "volume")]
        checkpoint: Option<PathBuf>,
        /// Evaluate reprojections of a static volume instead.
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Evaluate on the training views instead of the held-out ones.
        #[arg(long)]
        train_views: bool,
    },
}

/// Geometry, synthesis and ground-truth grid for `phantom`.
struct PhantomConfig {
    geometry: ScanGeometry,
    synthesis: SynthesisConfig,
    noise: bool,
    grid_size: usize,
    grid_extent: f64,
    seed: u64,
}

impl PhantomConfig {
    fn parse(text: &str) -> radsplat::Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let geometry = ScanGeometry::from_key_values(&mut kv)?;
        let d = SynthesisConfig::default();
        let e = ExperimentConfig::default();
        let c = Self {
            geometry,
            synthesis: SynthesisConfig {
                step: kv.take("step")?.unwrap_or(d.step),
                i0: kv.take("i0")?.unwrap_or(d.i0),
                scene_radius: kv.take("scene_radius")?.unwrap_or(d.scene_radius),
                noise_seed: None,
            },
            noise: kv.take("noise")?.unwrap_or(false),
            grid_size: kv.take("grid_size")?.unwrap_or(e.grid_size),
            grid_extent: kv.take("grid_extent")?.unwrap_or(e.grid_extent),
            seed: kv.take("seed")?.unwrap_or(0),
        };
        kv.finish()?;
        Ok(c)
    }

    fn to_text(&self) -> String {
        format!(
            "{}step = {}\ni0 = {}\nscene_radius = {}\nnoise = {}\ngrid_size = {}\ngrid_extent = {}\nseed = {}\n",
            self.geometry.to_manifest(),
            self.synthesis.step,
            self.synthesis.i0,
            self.synthesis.scene_radius,
            self.noise,
            self.grid_size,
            self.grid_extent,
            self.seed
        )
    }
}

fn read_config(common: &Common) -> anyhow::Result<String> {
    match &common.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(String::new()),
    }
}

fn experiment_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut c = ExperimentConfig::parse(&read_config(common)?)?;
    if let Some(s) = common.seed {
        c.seed = s;
        c.train.seed = s;
    }
    Ok(c)
}

/// `run_record.json`: what produced the run directory.
fn write_record(common: &Common, command: &str, seed: u64, effective_config: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(&common.out)?;
    let hash = hex::encode(Sha256::digest(effective_config.as_bytes()));
    let record = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config_hash": hash,
        "config_path": common.config.as_ref().map(|p| p.display().to_string()),
        "threads": rayon::current_num_threads(),
        "args": std::env::args().collect::<Vec<_>>(),
    });
    std::fs::write(common.out.join("run_record.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    std::fs::write(common.out.join("config.txt"), effective_config)?;
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<ProjectionDataset> {
    ProjectionDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn views(ds: &ProjectionDataset, cfg: &ExperimentConfig, train_side: bool) -> anyhow::Result<Vec<usize>> {
    let t = ds.geometry.frames;
    let v = if train_side { subsample_views(t, cfg.train_views)? } else { held_out_views(t, cfg.train_views)? };
    if let Some(j) = v.iter().find(|j| ds.position_of(**j).is_none()) {
        bail!("dataset lacks frame {j}; it must hold the complete scan");
    }
    Ok(v)
}

fn write_image(out: &Path, frame: &FrameSpec, rows: usize, cols: usize, values: &[f32]) -> anyhow::Result<()> {
    radsplat::io::write_f32_file(&out.join("render.f32"), values)?;
    std::fs::write(
        out.join("render.txt"),
        format!("rows = {rows}\ncols = {cols}\nangle_deg = {}\ntimestamp = {}\n", frame.angle_deg, frame.timestamp),
    )?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Phantom { common } => {
            let mut c = PhantomConfig::parse(&read_config(&common)?)?;
            if let Some(s) = common.seed {
                c.seed = s;
            }
            c.synthesis.noise_seed = c.noise.then_some(c.seed);
            let grid = GridSpec::centered_cube(c.grid_size, c.grid_extent)?;
            let ds = radsplat::default_phantom_dataset(&c.geometry, grid, &c.synthesis)?;
            write_record(&common, "phantom", c.seed, &c.to_text())?;
            ds.save(&common.out.join("dataset"))?;
            println!("wrote {} frames to {}", ds.len(), common.out.join("dataset").display());
        }
        Command::Fdk { common, dataset, all_views } => {
            let cfg = experiment_config(&common)?;
            let ds = load_dataset(&dataset)?;
            let set = if all_views { ds } else { ds.subset(&views(&ds, &cfg, true)?)? };
            write_record(&common, "fdk", cfg.seed, &cfg.to_text())?;
            let vol = fdk_reconstruct(&set, cfg.grid()?)?;
            vol.save(&common.out.join("fdk"))?;
            println!("reconstructed {} views, max {:.5}", set.len(), vol.max_value());
        }
        Command::Train { common, dataset } => {
            let cfg = experiment_config(&common)?;
            let ds = load_dataset(&dataset)?;
            let train_set = ds.subset(&views(&ds, &cfg, true)?)?;
            write_record(&common, "train", cfg.seed, &cfg.to_text())?;
            let (fdk, model) = initialize_model(&train_set, &cfg)?;
            fdk.save(&common.out.join("fdk_init"))?;
            let out = train(&train_set, model, &cfg.train, &TrainOutputs::to_dir(&common.out))?;
            let last = out.log.last();
            println!(
                "trained {} iterations, final loss {:.6}, {} kernels",
                cfg.train.iterations,
                last.map_or(f64::NAN, |r| r.loss),
                out.model.kernels.len()
            );
        }
        Command::Render {
            common,
            checkpoint,
            dataset,
            frame,
            angle,
            time,
        } => {
            let cfg = experiment_config(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let spec = match (frame, angle, time) {
                (Some(j), _, _) => ds.frames[ds.position_of(j).ok_or_else(|| anyhow!("dataset has no frame {j}"))?],
                (None, Some(a), Some(t)) => {
                    if !(0.0..=1.0).contains(&t) {
                        bail!("--time must lie in [0, 1]");
                    }
                    FrameSpec {
                        index: 0,
                        angle_deg: a,
                        timestamp: t,
                    }
                }
                _ => bail!("give --frame or both --angle and --time"),
            };
            write_record(&common, "render", cfg.seed, &cfg.to_text())?;
            let raster = RasterConfig {
                cutoff_sigma: Some(cfg.train.cutoff_sigma),
                ..RasterConfig::default()
            };
            let img = render(&model, &ds.geometry, &spec, &raster)?;
            write_image(&common.out, &spec, ds.geometry.rows, ds.geometry.cols, &img)?;
            println!("rendered angle {} time {}", spec.angle_deg, spec.timestamp);
        }
        Command::Voxelize {
            common,
            checkpoint,
            dataset,
            time,
        } => {
            let cfg = experiment_config(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            write_record(&common, "voxelize", cfg.seed, &cfg.to_text())?;
            let grid = cfg.grid()?;
            let (vol, name) = match (time, dataset) {
                (Some(t), _) => (voxelize(&model, t, grid)?, "volume"),
                (None, Some(d)) => {
                    let ds = load_dataset(&d)?;
                    let ts: Vec<f64> = frame_timestamps(&ds.geometry)?.iter().map(|f| f.timestamp).collect();
                    (average_volume(&model, &ts, grid)?, "volume_mean")
                }
                (None, None) => bail!("give --time or --dataset for the time average"),
            };
            vol.save(&common.out.join(name))?;
            println!("wrote {}", common.out.join(name).display());
        }
        Command::Mesh {
            common,
            volume,
            iso,
            reference,
        } => {
            let cfg = experiment_config(&common)?;
            let vol = AttenuationVolume::load(&volume)?;
            let iso = iso.unwrap_or(cfg.recon_iso);
            write_record(&common, "mesh", cfg.seed, &format!("{}iso = {iso}\n", cfg.to_text()))?;
            let mesh = marching_cubes(&vol, iso)?;
            mesh.save_obj(&common.out.join("mesh.obj"))?;
            println!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
            if let Some(r) = reference {
                let reference = TriangleMesh::load_obj(&r)?;
                let (cd, hd) = chamfer_hausdorff(&mesh, &reference, cfg.mesh_samples, cfg.seed)?;
                std::fs::write(common.out.join("mesh_metrics.csv"), format!("chamfer_mm,hausdorff_mm\n{cd:.6},{hd:.6}\n"))?;
                println!("CD {cd:.4} mm, HD {hd:.4} mm");
            }
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            volume,
            train_views,
        } => {
            let cfg = experiment_config(&common)?;
            let ds = load_dataset(&dataset)?;
            let idx = views(&ds, &cfg, train_views)?;
            write_record(&common, "eval", cfg.seed, &cfg.to_text())?;
            let report = match (checkpoint, volume) {
                (Some(c), _) => evaluate_model(&load_checkpoint(&c)?, &ds, &idx)?,
                (None, Some(v)) => evaluate_volume(&AttenuationVolume::load(&v)?, &ds, &idx)?,
                (None, None) => bail!("give --checkpoint or --volume"),
            };
            std::fs::write(common.out.join("metrics.csv"), report.to_csv())?;
            println!("{} frames: PSNR {:.3} dB, SSIM {:.4}", report.frames.len(), report.mean_psnr_db, report.mean_ssim);
        }
    }
    Ok(())
}

fn common(c: &Command) -> &Common {
    match c {
        Command::Phantom { common }
        | Command::Fdk { common, .. }
        | Command::Train { common, .. }
        | Command::Render { common, .. }
        | Command::Voxelize { common, .. }
        | Command::Mesh { common, .. }
        | Command::Eval { common, .. } => common,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = common(&cli.command).threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
