//! Runs the synthetic end-to-end experiment and prints metrics.
//!
//! `cargo run --release --example reconstruct -- [config.txt] [out_dir]`

use std::path::PathBuf;

use radsplat::{default_phantom_dataset, run_experiment, ExperimentConfig, ScanGeometry, SynthesisConfig};

fn main() -> radsplat::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(p) => ExperimentConfig::parse(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let out = args.get(1).map(PathBuf::from);
    let t = std::time::Instant::now();
    let ds = default_phantom_dataset(&ScanGeometry::default(), cfg.grid()?, &SynthesisConfig::default())?;
    println!("dataset: {} frames in {:.1}s", ds.len(), t.elapsed().as_secs_f64());
    let r = run_experiment(&ds, &cfg, out.as_deref())?;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let l = &r.losses;
    for w in (0..l.len()).step_by(500) {
        println!("iter {:>6} loss {:.5} kernels {}", w + 1, mean(&l[w..(w + 100).min(l.len())]), r.kernel_counts[w]);
    }
    println!("held-out PSNR {:.2} dB SSIM {:.4}", r.test_report.mean_psnr_db, r.test_report.mean_ssim);
    println!("FDK reprojection PSNR {:.2} dB SSIM {:.4}", r.fdk_report.mean_psnr_db, r.fdk_report.mean_ssim);
    println!("mesh: {} recon / {} gt triangles", r.recon_mesh.triangles.len(), r.gt_mesh.triangles.len());
    println!("CD {:.3} mm HD {:.3} mm", r.chamfer_mm, r.hausdorff_mm);
    println!("train {:.1}s total {:.1}s", r.train_seconds, r.total_seconds);
    Ok(())
}
