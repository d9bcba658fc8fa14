//! Binary model checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "4DRG"
//! 4       4         u32 format version (1)
//! 8       8         u64 kernel count M
//! 16      8         f64 s_min
//! 24      8         f64 s_max
//! 32      40·M      per kernel 10 × f32: position xyz, rotation wxyz, raw scale xyz
//! ...               network section:
//!         4         u32 hidden width
//!         2×32      two encoding blocks (3D then 4D), each
//!                   u32 input_dim, u32 levels, u64 table_size, u32 feature_dim,
//!                   u32 base_resolution, f64 growth_factor
//!         48        f64 scene_lo xyz, f64 scene_hi xyz
//!         8         f64 output_bias
//!         8         u64 seed
//!         8         u64 parameter count P
//!         4·P       f32 parameters in DnafModel::params order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::dnaf::{DnafConfig, DnafModel, HashEncodingConfig};
use crate::error::{format_err, Error, Result};
use crate::kernel::{KernelSet, RawKernelParams, ScaleBounds};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"4DRG";
pub const VERSION: u32 = 1;

/// Kernels plus the attenuation network.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub kernels: KernelSet<T>,
    pub dnaf: DnafModel<T>,
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            kernels: self.kernels.cast(),
            dnaf: self.dnaf.cast(),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn encoding(&mut self, e: &HashEncodingConfig) {
        self.u32(e.input_dim as u32);
        self.u32(e.levels as u32);
        self.u64(e.table_size as u64);
        self.u32(e.feature_dim as u32);
        self.u32(e.base_resolution as u32);
        self.f64(e.growth_factor);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| format_err(self.path, format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn count(&mut self, per_item: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        let remaining = self.data.len() - self.pos;
        if n.checked_mul(per_item).is_none_or(|b| b > remaining) {
            return Err(format_err(self.path, format!("count {n} exceeds file size")));
        }
        Ok(n)
    }
    fn encoding(&mut self) -> Result<HashEncodingConfig> {
        Ok(HashEncodingConfig {
            input_dim: self.u32()? as usize,
            levels: self.u32()? as usize,
            table_size: self.u64()? as usize,
            feature_dim: self.u32()? as usize,
            base_resolution: self.u32()? as usize,
            growth_factor: self.f64()?,
        })
    }
}

/// Serializes the model; values are stored as `f32`.
pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Vec<u8> {
    let k = &model.kernels;
    let mut w = Writer(Vec::with_capacity(64 + 40 * k.len() + 4 * model.dnaf.params.len()));
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(k.len() as u64);
    w.f64(k.bounds().s_min());
    w.f64(k.bounds().s_max());
    for raw in k.iter_raw() {
        for v in raw.position.iter().chain(raw.rotation.iter()).chain(raw.scale.iter()) {
            w.f32(v.to_f64() as f32);
        }
    }
    let c = &model.dnaf.config;
    w.u32(c.hidden as u32);
    w.encoding(&c.encoding_3d);
    w.encoding(&c.encoding_4d);
    for v in c.scene_lo.iter().chain(c.scene_hi.iter()) {
        w.f64(*v);
    }
    w.f64(c.output_bias);
    w.u64(c.seed);
    w.u64(model.dnaf.params.len() as u64);
    for v in &model.dnaf.params {
        w.f32(v.to_f64() as f32);
    }
    w.0
}

pub fn decode_checkpoint(data: &[u8], path: &Path) -> Result<Model<f32>> {
    let mut r = Reader { data, pos: 0, path };
    if &r.take::<4>()? != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let m = r.count(40)?;
    let bounds = ScaleBounds::new(r.f64()?, r.f64()?)?;
    let mut kernels = KernelSet::new(bounds);
    for _ in 0..m {
        let mut v = [0f32; 10];
        for x in &mut v {
            *x = r.f32()?;
        }
        kernels
            .push(RawKernelParams::new(
                Vector3::new(v[0], v[1], v[2]),
                nalgebra::Vector4::new(v[3], v[4], v[5], v[6]),
                Vector3::new(v[7], v[8], v[9]),
            )?)
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    let hidden = r.u32()? as usize;
    let encoding_3d = r.encoding()?;
    let encoding_4d = r.encoding()?;
    let mut b = [0.0; 6];
    for x in &mut b {
        *x = r.f64()?;
    }
    let config = DnafConfig {
        encoding_3d,
        encoding_4d,
        hidden,
        output_bias: r.f64()?,
        scene_lo: Vector3::new(b[0], b[1], b[2]),
        scene_hi: Vector3::new(b[3], b[4], b[5]),
        seed: r.u64()?,
    };
    let p = r.count(4)?;
    let mut params = Vec::with_capacity(p);
    for _ in 0..p {
        params.push(r.f32()?);
    }
    if r.pos != data.len() {
        return Err(format_err(path, format!("{} trailing bytes", data.len() - r.pos)));
    }
    let dnaf = DnafModel::from_params(config, params).map_err(|e| format_err(path, e.to_string()))?;
    Ok(Model { kernels, dnaf })
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(Error::from)?
        .read_to_end(&mut data)?;
    decode_checkpoint(&data, path)
}
