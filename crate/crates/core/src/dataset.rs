//! A set of DSA projections with their acquisition geometry.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! manifest.txt            geometry keys, then one `frame <index> <angle> <t>` line per frame
//! frames/frame_0001.f32   rows×cols little-endian f32, row-major, per listed frame
//! gt_volume.f32/.txt      optional reference volume
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{format_err, invalid, Error, Result};
use crate::geometry::{FrameSpec, ScanGeometry};
use crate::io::{read_f32_file, write_f32_file};
use crate::volume::AttenuationVolume;

pub const MANIFEST: &str = "manifest.txt";
pub const GROUND_TRUTH: &str = "gt_volume";

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionDataset {
    pub geometry: ScanGeometry,
    /// Frames present, in capture order. May be a subset of the scan.
    pub frames: Vec<FrameSpec>,
    /// One row-major image per entry of `frames`.
    pub images: Vec<Vec<f32>>,
    pub ground_truth: Option<AttenuationVolume>,
}

impl ProjectionDataset {
    pub fn new(geometry: ScanGeometry, frames: Vec<FrameSpec>, images: Vec<Vec<f32>>) -> Result<Self> {
        geometry.validate()?;
        if frames.len() != images.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} frames but {} images",
                frames.len(),
                images.len()
            )));
        }
        let px = geometry.rows * geometry.cols;
        for (f, img) in frames.iter().zip(&images) {
            if img.len() != px {
                return Err(Error::DimensionMismatch(format!(
                    "frame {} has {} pixels, detector has {px}",
                    f.index,
                    img.len()
                )));
            }
            if f.index == 0 || f.index > geometry.frames {
                return Err(invalid(format!("frame index {} outside the scan", f.index)));
            }
        }
        if frames.windows(2).any(|w| w[0].index >= w[1].index) {
            return Err(invalid("frames must be strictly increasing"));
        }
        Ok(Self {
            geometry,
            frames,
            images,
            ground_truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Position of the frame with the given 1-based scan index.
    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.frames.binary_search_by_key(&index, |f| f.index).ok()
    }

    /// Keeps the listed 1-based frame indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut frames = Vec::with_capacity(indices.len());
        let mut images = Vec::with_capacity(indices.len());
        for &j in indices {
            let p = self
                .position_of(j)
                .ok_or_else(|| invalid(format!("frame {j} not in dataset")))?;
            frames.push(self.frames[p]);
            images.push(self.images[p].clone());
        }
        let mut out = Self::new(self.geometry.clone(), frames, images)?;
        out.ground_truth = self.ground_truth.clone();
        Ok(out)
    }

    pub fn manifest(&self) -> String {
        let mut s = self.geometry.to_manifest();
        for f in &self.frames {
            let _ = writeln!(s, "{f}");
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("frames"))?;
        std::fs::write(dir.join(MANIFEST), self.manifest())?;
        for (f, img) in self.frames.iter().zip(&self.images) {
            write_f32_file(&frame_path(dir, f.index), img)?;
        }
        if let Some(gt) = &self.ground_truth {
            gt.save(&dir.join(GROUND_TRUTH))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&manifest_path)?;
        let mut kv = KeyValues::parse(&text)?;
        let geometry = ScanGeometry::from_key_values(&mut kv)?;
        let frames = kv
            .take_all("frame")
            .into_iter()
            .map(|(line, v)| {
                v.parse::<FrameSpec>().map_err(|e| Error::Config {
                    line,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        kv.finish()?;
        let px = geometry.rows * geometry.cols;
        let mut images = Vec::with_capacity(frames.len());
        for f in &frames {
            let path = frame_path(dir, f.index);
            let img = read_f32_file(&path)?;
            if img.len() != px {
                return Err(format_err(path, format!("expected {px} pixels, found {}", img.len())));
            }
            images.push(img);
        }
        let mut out = Self::new(geometry, frames, images)?;
        let gt = dir.join(GROUND_TRUTH);
        if gt.with_extension("f32").exists() {
            out.ground_truth = Some(AttenuationVolume::load(&gt)?);
        }
        Ok(out)
    }
}

pub fn frame_path(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join("frames").join(format!("frame_{index:04}.f32"))
}
