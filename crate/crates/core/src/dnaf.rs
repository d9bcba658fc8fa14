//! Dynamic attenuation field: multiresolution hash encodings of `p` and
//! `(p, t)` decoded by a two-layer ReLU network into a kernel amplitude.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::real::Real;

const PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashEncodingConfig {
    pub input_dim: usize,
    pub levels: usize,
    pub table_size: usize,
    pub feature_dim: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
}

impl HashEncodingConfig {
    /// Static spatial encoding: 12 levels of 2¹⁹ two-dimensional entries,
    /// base resolution 8, growth 1.45.
    pub fn spatial_default() -> Self {
        Self {
            input_dim: 3,
            levels: 12,
            table_size: 1 << 19,
            feature_dim: 2,
            base_resolution: 8,
            growth_factor: 1.45,
        }
    }

    /// Space-time encoding: base resolution 2, growth 1.4.
    pub fn spacetime_default() -> Self {
        Self {
            input_dim: 4,
            base_resolution: 2,
            growth_factor: 1.4,
            ..Self::spatial_default()
        }
    }

    pub fn with_table_size(self, table_size: usize) -> Self {
        Self { table_size, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=4).contains(&self.input_dim) {
            return Err(invalid("hash encoding input must be 3D or 4D"));
        }
        if self.levels == 0 || self.feature_dim == 0 {
            return Err(invalid("levels and feature_dim must be >= 1"));
        }
        if !self.table_size.is_power_of_two() {
            return Err(invalid(format!("table size {} is not a power of two", self.table_size)));
        }
        if !(self.growth_factor > 1.0) || self.base_resolution < 2 {
            return Err(invalid("need growth > 1 and base resolution >= 2"));
        }
        Ok(())
    }

    pub fn resolution(&self, level: usize) -> usize {
        ((self.base_resolution as f64 * self.growth_factor.powi(level as i32)).floor() as usize).max(2)
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feature_dim
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_size * self.feature_dim
    }
}

/// Visits the `2^dim` cell corners around `u` at one level: table slot,
/// interpolation weight and the weight's derivative along each input axis.
#[inline]
fn for_each_corner<T: Real>(cfg: &HashEncodingConfig, level: usize, u: &[T; 4], mut visit: impl FnMut(usize, T, [T; 4])) {
    let dim = cfg.input_dim;
    let res = cfg.resolution(level);
    let scale = T::lit((res - 1) as f64);
    let mut base = [0u32; 4];
    let mut frac = [T::ZERO; 4];
    for a in 0..dim {
        let x = u[a] * scale;
        let i0 = (x.floor().to_f64().max(0.0) as u32).min(res as u32 - 2);
        base[a] = i0;
        frac[a] = x - T::lit(i0 as f64);
    }
    let mask = cfg.table_size as u32 - 1;
    for corner in 0..(1usize << dim) {
        let mut h = 0u32;
        let mut w = T::ONE;
        let mut parts = [T::ONE; 4];
        for a in 0..dim {
            let up = (corner >> a) & 1 == 1;
            h ^= (base[a] + u32::from(up)).wrapping_mul(PRIMES[a]);
            parts[a] = if up { frac[a] } else { T::ONE - frac[a] };
            w *= parts[a];
        }
        let mut dw = [T::ZERO; 4];
        for a in 0..dim {
            let sign = if (corner >> a) & 1 == 1 { T::ONE } else { -T::ONE };
            let mut d = sign * scale;
            for (b, p) in parts.iter().enumerate().take(dim) {
                if b != a {
                    d *= *p;
                }
            }
            dw[a] = d;
        }
        let slot = level * cfg.table_size + (h & mask) as usize;
        visit(slot, w, dw);
    }
}

/// Multilinear hash-grid features of `u ∈ [0,1]^dim` (clamped), level-major.
pub fn hash_encode<T: Real>(cfg: &HashEncodingConfig, table: &[T], u: &[T]) -> Result<Vec<T>> {
    cfg.validate()?;
    if u.len() != cfg.input_dim || table.len() != cfg.param_count() {
        return Err(Error::DimensionMismatch("hash encoding input or table size".into()));
    }
    let mut uu = [T::ZERO; 4];
    for (a, v) in u.iter().enumerate() {
        uu[a] = v.clamp(T::ZERO, T::ONE);
    }
    let mut out = vec![T::ZERO; cfg.output_dim()];
    encode_into(cfg, table, &uu, &mut out);
    Ok(out)
}

fn encode_into<T: Real>(cfg: &HashEncodingConfig, table: &[T], u: &[T; 4], out: &mut [T]) {
    let f = cfg.feature_dim;
    for level in 0..cfg.levels {
        let o = &mut out[level * f..(level + 1) * f];
        o.fill(T::ZERO);
        for_each_corner(cfg, level, u, |slot, w, _| {
            for k in 0..f {
                o[k] += w * table[slot * f + k];
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnafConfig {
    pub encoding_3d: HashEncodingConfig,
    pub encoding_4d: HashEncodingConfig,
    pub hidden: usize,
    /// Initial output bias; a positive value keeps the output ReLU active.
    pub output_bias: f64,
    /// Scene box used to normalize positions into `[0,1]³`.
    pub scene_lo: Vector3<f64>,
    pub scene_hi: Vector3<f64>,
    pub seed: u64,
}

impl DnafConfig {
    pub fn new(scene_lo: Vector3<f64>, scene_hi: Vector3<f64>) -> Self {
        Self {
            encoding_3d: HashEncodingConfig::spatial_default(),
            encoding_4d: HashEncodingConfig::spacetime_default(),
            hidden: 64,
            output_bias: 0.0,
            scene_lo,
            scene_hi,
            seed: 0,
        }
    }

    pub fn with_table_size(mut self, table_size: usize) -> Self {
        self.encoding_3d = self.encoding_3d.with_table_size(table_size);
        self.encoding_4d = self.encoding_4d.with_table_size(table_size);
        self
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DnafLayout {
    pub table_3d: usize,
    pub table_4d: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnafModel<T: Real> {
    pub config: DnafConfig,
    pub layout: DnafLayout,
    /// `table_3d | table_4d | W1 (hidden × input, row-major) | b1 | w2 | b2`.
    pub params: Vec<T>,
}

/// Activations kept from a forward batch for the matching backward call.
#[derive(Debug, Clone)]
pub struct DnafCache<T: Real> {
    inputs: Vec<[T; 4]>,
    /// Whether each position coordinate was inside the scene box (not clamped).
    inside: Vec<[bool; 3]>,
    features: Vec<T>,
    hidden: Vec<T>,
    output_pre: Vec<T>,
}

impl<T: Real> DnafCache<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DnafGradients<T: Real> {
    /// Same layout as [`DnafModel::params`].
    pub params: Vec<T>,
    /// `dL/dp` per input, when requested.
    pub positions: Option<Vec<Vector3<T>>>,
}

impl<T: Real> DnafModel<T> {
    pub fn new(config: DnafConfig) -> Result<Self> {
        let layout = Self::check_config(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![T::ZERO; layout.len];
        for v in &mut params[layout.table_3d..layout.w1] {
            *v = T::lit(rng.gen_range(-1e-4..1e-4));
        }
        let input = config.encoding_3d.output_dim() + config.encoding_4d.output_dim();
        let a1 = (6.0 / input as f64).sqrt();
        for v in &mut params[layout.w1..layout.b1] {
            *v = T::lit(rng.gen_range(-a1..a1));
        }
        let a2 = (6.0 / config.hidden as f64).sqrt();
        for v in &mut params[layout.w2..layout.b2] {
            *v = T::lit(rng.gen_range(-a2..a2));
        }
        params[layout.b2] = T::lit(config.output_bias);
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: DnafConfig, params: Vec<T>) -> Result<Self> {
        let layout = Self::check_config(&config)?;
        if params.len() != layout.len {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters, layout needs {}",
                params.len(),
                layout.len
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameter".into()));
        }
        Ok(Self { config, layout, params })
    }

    fn check_config(c: &DnafConfig) -> Result<DnafLayout> {
        c.encoding_3d.validate()?;
        c.encoding_4d.validate()?;
        if c.encoding_3d.input_dim != 3 || c.encoding_4d.input_dim != 4 {
            return Err(invalid("need a 3D and a 4D encoding"));
        }
        if c.hidden == 0 {
            return Err(invalid("hidden width must be >= 1"));
        }
        if (0..3).any(|a| !(c.scene_hi[a] > c.scene_lo[a])) {
            return Err(invalid("scene box must have positive extent"));
        }
        let input = c.encoding_3d.output_dim() + c.encoding_4d.output_dim();
        let table_3d = 0;
        let table_4d = c.encoding_3d.param_count();
        let w1 = table_4d + c.encoding_4d.param_count();
        let b1 = w1 + c.hidden * input;
        let w2 = b1 + c.hidden;
        let b2 = w2 + c.hidden;
        Ok(DnafLayout {
            table_3d,
            table_4d,
            w1,
            b1,
            w2,
            b2,
            len: b2 + 1,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.encoding_3d.output_dim() + self.config.encoding_4d.output_dim()
    }

    pub fn cast<U: Real>(&self) -> DnafModel<U> {
        DnafModel {
            config: self.config.clone(),
            layout: self.layout,
            params: self.params.iter().map(|v| U::lit(v.to_f64())).collect(),
        }
    }

    fn normalize(&self, p: &Vector3<T>, t: T) -> Result<([T; 4], [bool; 3])> {
        if p.iter().any(|v| !v.is_finite()) || !t.is_finite() {
            return Err(Error::NonFinite(format!("network input {p:?}, t = {t:?}")));
        }
        let mut u = [T::ZERO; 4];
        let mut inside = [true; 3];
        for a in 0..3 {
            let lo = T::lit(self.config.scene_lo[a]);
            let ext = T::lit(self.config.scene_hi[a] - self.config.scene_lo[a]);
            let v = (p[a] - lo) / ext;
            inside[a] = v >= T::ZERO && v <= T::ONE;
            u[a] = v.clamp(T::ZERO, T::ONE);
        }
        u[3] = t.clamp(T::ZERO, T::ONE);
        Ok((u, inside))
    }

    fn features(&self, u: &[T; 4], out: &mut [T]) {
        let (e3, e4) = (&self.config.encoding_3d, &self.config.encoding_4d);
        let l = &self.layout;
        let n3 = e3.output_dim();
        encode_into(e3, &self.params[l.table_3d..l.table_4d], u, &mut out[..n3]);
        encode_into(e4, &self.params[l.table_4d..l.w1], u, &mut out[n3..]);
    }

    /// `ρ(p, t)` for one input.
    pub fn eval(&self, p: &Vector3<T>, t: T) -> Result<T> {
        Ok(self.forward_batch(std::slice::from_ref(p), &[t])?.0[0])
    }

    /// Amplitudes for a batch plus the activations needed by [`Self::backward`].
    pub fn forward_batch(&self, positions: &[Vector3<T>], times: &[T]) -> Result<(Vec<T>, DnafCache<T>)> {
        if positions.len() != times.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} positions but {} times",
                positions.len(),
                times.len()
            )));
        }
        let n = positions.len();
        let (ni, nh) = (self.input_dim(), self.config.hidden);
        let mut inputs = Vec::with_capacity(n);
        let mut inside = Vec::with_capacity(n);
        for (p, &t) in positions.iter().zip(times) {
            let (u, ins) = self.normalize(p, t)?;
            inputs.push(u);
            inside.push(ins);
        }
        let mut features = vec![T::ZERO; n * ni];
        let mut hidden = vec![T::ZERO; n * nh];
        let mut output_pre = vec![T::ZERO; n];
        let l = self.layout;
        let (w1, b1) = (&self.params[l.w1..l.b1], &self.params[l.b1..l.w2]);
        let (w2, b2) = (&self.params[l.w2..l.b2], self.params[l.b2]);
        features
            .par_chunks_mut(ni)
            .zip(hidden.par_chunks_mut(nh))
            .zip(output_pre.par_iter_mut())
            .zip(inputs.par_iter())
            .for_each(|(((feat, hid), out), u)| {
                self.features(u, feat);
                let mut acc = b2;
                for j in 0..nh {
                    let row = &w1[j * ni..(j + 1) * ni];
                    let mut z = b1[j];
                    for (w, x) in row.iter().zip(feat.iter()) {
                        z += *w * *x;
                    }
                    let h = z.relu();
                    hid[j] = h;
                    acc += w2[j] * h;
                }
                *out = acc;
            });
        let rho = output_pre.iter().map(|v| v.relu()).collect();
        Ok((
            rho,
            DnafCache {
                inputs,
                inside,
                features,
                hidden,
                output_pre,
            },
        ))
    }

    /// Adjoint of [`Self::forward_batch`]. Table gradients are scattered in
    /// input order and MLP partial sums reduced in fixed chunk order, so the
    /// result does not depend on the thread count.
    pub fn backward(&self, cache: &DnafCache<T>, upstream: &[T], want_positions: bool) -> Result<DnafGradients<T>> {
        let n = cache.len();
        let (ni, nh) = (self.input_dim(), self.config.hidden);
        if upstream.len() != n || cache.features.len() != n * ni || cache.hidden.len() != n * nh {
            return Err(Error::MissingForwardState(format!(
                "cache holds {n} inputs, upstream has {}",
                upstream.len()
            )));
        }
        let l = self.layout;
        let w1 = &self.params[l.w1..l.b1];
        let w2 = &self.params[l.w2..l.b2];

        // Per-input gradient with respect to the encoded features.
        let mut d_feat = vec![T::ZERO; n * ni];
        let chunk_mlp: Vec<Vec<T>> = d_feat
            .par_chunks_mut(ni * CHUNK)
            .enumerate()
            .map(|(c, dfeat_chunk)| {
                let mut g = vec![T::ZERO; l.len - l.w1];
                let (gw1, rest) = g.split_at_mut(l.b1 - l.w1);
                let (gb1, rest) = rest.split_at_mut(nh);
                let (gw2, gb2) = rest.split_at_mut(nh);
                let mut dh = vec![T::ZERO; nh];
                for (k, df) in dfeat_chunk.chunks_mut(ni).enumerate() {
                    let i = c * CHUNK + k;
                    if !(cache.output_pre[i] > T::ZERO) || upstream[i] == T::ZERO {
                        continue;
                    }
                    let d_out = upstream[i];
                    gb2[0] += d_out;
                    let h = &cache.hidden[i * nh..(i + 1) * nh];
                    let x = &cache.features[i * ni..(i + 1) * ni];
                    for j in 0..nh {
                        gw2[j] += d_out * h[j];
                        dh[j] = if h[j] > T::ZERO { d_out * w2[j] } else { T::ZERO };
                    }
                    for j in 0..nh {
                        if dh[j] == T::ZERO {
                            continue;
                        }
                        gb1[j] += dh[j];
                        let row = &w1[j * ni..(j + 1) * ni];
                        let grow = &mut gw1[j * ni..(j + 1) * ni];
                        for a in 0..ni {
                            grow[a] += dh[j] * x[a];
                            df[a] += dh[j] * row[a];
                        }
                    }
                }
                g
            })
            .collect();

        let mut grads = vec![T::ZERO; l.len];
        for g in &chunk_mlp {
            for (o, v) in grads[l.w1..].iter_mut().zip(g) {
                *o += *v;
            }
        }

        let (e3, e4) = (&self.config.encoding_3d, &self.config.encoding_4d);
        let n3 = e3.output_dim();
        let f3 = e3.feature_dim;
        let f4 = e4.feature_dim;
        {
            let (g3, rest) = grads[l.table_3d..l.w1].split_at_mut(l.table_4d - l.table_3d);
            for i in 0..n {
                let df = &d_feat[i * ni..(i + 1) * ni];
                if df.iter().all(|v| *v == T::ZERO) {
                    continue;
                }
                let u = &cache.inputs[i];
                for level in 0..e3.levels {
                    let d = &df[level * f3..(level + 1) * f3];
                    for_each_corner(e3, level, u, |slot, w, _| {
                        for k in 0..f3 {
                            g3[slot * f3 + k] += w * d[k];
                        }
                    });
                }
                for level in 0..e4.levels {
                    let d = &df[n3 + level * f4..n3 + (level + 1) * f4];
                    for_each_corner(e4, level, u, |slot, w, _| {
                        for k in 0..f4 {
                            rest[slot * f4 + k] += w * d[k];
                        }
                    });
                }
            }
        }

        let positions = want_positions.then(|| {
            let t3 = &self.params[l.table_3d..l.table_4d];
            let t4 = &self.params[l.table_4d..l.w1];
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let df = &d_feat[i * ni..(i + 1) * ni];
                    let u = &cache.inputs[i];
                    let mut du = [T::ZERO; 4];
                    for level in 0..e3.levels {
                        let d = &df[level * f3..(level + 1) * f3];
                        for_each_corner(e3, level, u, |slot, _, dw| {
                            let s: T = (0..f3).fold(T::ZERO, |acc, k| acc + d[k] * t3[slot * f3 + k]);
                            for a in 0..3 {
                                du[a] += s * dw[a];
                            }
                        });
                    }
                    for level in 0..e4.levels {
                        let d = &df[n3 + level * f4..n3 + (level + 1) * f4];
                        for_each_corner(e4, level, u, |slot, _, dw| {
                            let s: T = (0..f4).fold(T::ZERO, |acc, k| acc + d[k] * t4[slot * f4 + k]);
                            for a in 0..3 {
                                du[a] += s * dw[a];
                            }
                        });
                    }
                    Vector3::from_fn(|a, _| {
                        if cache.inside[i][a] {
                            du[a] / T::lit(self.config.scene_hi[a] - self.config.scene_lo[a])
                        } else {
                            T::ZERO
                        }
                    })
                })
                .collect()
        });
        Ok(DnafGradients { params: grads, positions })
    }
}
