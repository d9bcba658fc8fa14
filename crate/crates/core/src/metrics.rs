//! Image quality metrics over held-out frames.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss::{data_range, ssim};

/// Reported PSNR ceiling, also used for exact matches.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10·log10(R²/MSE)` with `R` the ground truth's dynamic range.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    let mse = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / gt.len() as f64;
    let r = data_range(gt);
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (r * r / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    /// `frame_index,psnr_db,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_index,psnr_db,ssim\n");
        for f in &self.frames {
            let _ = writeln!(s, "{},{:.6},{:.6}", f.frame_index, f.psnr_db, f.ssim);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr_db, self.mean_ssim);
        s
    }
}

/// Per-frame and mean PSNR/SSIM; `frames` pairs a frame index with its
/// predicted and ground-truth images.
pub fn eval_images(frames: &[(usize, &[f32], &[f32])], rows: usize, cols: usize) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(frames.len());
    for &(idx, pred, gt) in frames {
        if pred.len() != rows * cols || gt.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!("frame {idx} does not match {rows}x{cols}")));
        }
        let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
        let g: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
        out.push(FrameMetrics {
            frame_index: idx,
            psnr_db: psnr(&p, &g)?,
            ssim: ssim(&p, &g, rows, cols, data_range(&g))?,
        });
    }
    let n = out.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr_db: out.iter().map(|f| f.psnr_db).sum::<f64>() / n,
        mean_ssim: out.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames: out,
    })
}
