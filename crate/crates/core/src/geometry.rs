//! Circular cone-beam acquisition geometry.
//!
//! The source orbits the isocenter in the `z = 0` plane. At gantry angle θ the
//! source sits at `sod·(cos θ, sin θ, 0)` and the flat detector is centered on
//! the central ray at distance `sdd` from the source, its columns along the
//! orbit tangent `(−sin θ, cos θ, 0)` and its rows along `+z`.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::config::KeyValues;
use crate::error::{invalid, Error, Result};

/// Rotation direction viewed from `+z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Spin {
    #[default]
    CounterClockwise,
    Clockwise,
}

impl Spin {
    fn sign(self) -> f64 {
        match self {
            Spin::CounterClockwise => 1.0,
            Spin::Clockwise => -1.0,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Spin::CounterClockwise => "ccw",
            Spin::Clockwise => "cw",
        }
    }
}

impl std::str::FromStr for Spin {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ccw" => Ok(Spin::CounterClockwise),
            "cw" => Ok(Spin::Clockwise),
            other => Err(format!("spin must be `ccw` or `cw`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    /// Source to isocenter distance, mm.
    pub sod: f64,
    /// Source to detector distance, mm.
    pub sdd: f64,
    pub rows: usize,
    pub cols: usize,
    /// Pixel pitch along columns (u) and rows (v), mm.
    pub du: f64,
    pub dv: f64,
    pub arc_deg: f64,
    pub frames: usize,
    pub angle0_deg: f64,
    pub spin: Spin,
}

impl Default for ScanGeometry {
    /// Scanner distances and arc of a clinical C-arm, detector at desk scale.
    fn default() -> Self {
        Self {
            sod: 750.0,
            sdd: 1200.0,
            rows: 64,
            cols: 64,
            du: 2.0,
            dv: 2.0,
            arc_deg: 198.0,
            frames: 133,
            angle0_deg: 0.0,
            spin: Spin::CounterClockwise,
        }
    }
}

/// One acquired frame: 1-based index, gantry angle, normalized timestamp `j / T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSpec {
    pub index: usize,
    pub angle_deg: f64,
    pub timestamp: f64,
}

/// A ray `o + a·d`, optionally bounded to `[near, far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(invalid("ray direction must be nonzero"));
        }
        Ok(Self {
            origin,
            direction: direction / n,
            near: f64::NEG_INFINITY,
            far: f64::INFINITY,
        })
    }

    pub fn at(&self, a: f64) -> Vector3<f64> {
        self.origin + self.direction * a
    }

    pub fn is_bounded(&self) -> bool {
        self.near.is_finite() && self.far.is_finite()
    }

    /// Clips to a sphere; `None` when the line misses it.
    pub fn clip_to_sphere(&self, center: &Vector3<f64>, radius: f64) -> Option<Ray> {
        let oc = self.origin - center;
        let b = oc.dot(&self.direction);
        let c = oc.norm_squared() - radius * radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let (a0, a1) = ((-b - s).max(self.near), (-b + s).min(self.far));
        (a0 < a1).then_some(Ray {
            near: a0,
            far: a1,
            ..*self
        })
    }

    /// Clips to an axis-aligned box; `None` when the line misses it.
    pub fn clip_to_box(&self, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<Ray> {
        let (mut a0, mut a1) = (self.near, self.far);
        for k in 0..3 {
            let d = self.direction[k];
            if d.abs() < 1e-300 {
                if self.origin[k] < lo[k] || self.origin[k] > hi[k] {
                    return None;
                }
                continue;
            }
            let (mut t0, mut t1) = ((lo[k] - self.origin[k]) / d, (hi[k] - self.origin[k]) / d);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            a0 = a0.max(t0);
            a1 = a1.min(t1);
        }
        (a0 < a1).then_some(Ray {
            near: a0,
            far: a1,
            ..*self
        })
    }
}

/// Source and detector placement for one gantry angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePose {
    pub source: Vector3<f64>,
    pub detector_center: Vector3<f64>,
    /// Unit vector from the source toward the isocenter.
    pub central_axis: Vector3<f64>,
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.sod > 0.0 && self.sdd > self.sod && self.sdd.is_finite()) {
            return Err(invalid(format!(
                "need sdd > sod > 0, got sod={} sdd={}",
                self.sod, self.sdd
            )));
        }
        if self.rows == 0 || self.cols == 0 || self.frames == 0 {
            return Err(invalid("rows, cols and frames must be at least 1"));
        }
        if !(self.du > 0.0 && self.dv > 0.0) {
            return Err(invalid("pixel size must be positive"));
        }
        if !(self.arc_deg > 0.0 && self.arc_deg <= 360.0) {
            return Err(invalid(format!("arc must lie in (0, 360], got {}", self.arc_deg)));
        }
        if !self.angle0_deg.is_finite() {
            return Err(invalid("start angle must be finite"));
        }
        Ok(())
    }

    /// Angular spacing between consecutive frames, degrees.
    pub fn angle_step_deg(&self) -> f64 {
        if self.frames > 1 {
            self.arc_deg / (self.frames - 1) as f64
        } else {
            0.0
        }
    }

    /// Frame `j` (1-based).
    pub fn frame(&self, j: usize) -> Result<FrameSpec> {
        if j == 0 || j > self.frames {
            return Err(invalid(format!("frame index {j} outside 1..={}", self.frames)));
        }
        Ok(FrameSpec {
            index: j,
            angle_deg: self.angle0_deg + (j - 1) as f64 * self.angle_step_deg(),
            timestamp: j as f64 / self.frames as f64,
        })
    }

    pub fn pose(&self, angle_deg: f64) -> FramePose {
        let th = self.spin.sign() * angle_deg.to_radians();
        let (s, c) = th.sin_cos();
        let radial = Vector3::new(c, s, 0.0);
        let source = radial * self.sod;
        let central_axis = -radial;
        FramePose {
            source,
            detector_center: source + central_axis * self.sdd,
            central_axis,
            u_axis: Vector3::new(-s, c, 0.0),
            v_axis: Vector3::new(0.0, 0.0, 1.0),
        }
    }

    /// Detector-plane offset `(u, v)` in mm of a continuous pixel coordinate.
    /// Pixel `(r, c)` has its center at `(r + 0.5, c + 0.5)`.
    pub fn detector_offset(&self, row_coord: f64, col_coord: f64) -> (f64, f64) {
        (
            (col_coord - self.cols as f64 / 2.0) * self.du,
            (row_coord - self.rows as f64 / 2.0) * self.dv,
        )
    }

    /// Ray from the source through `(row + offset.0, col + offset.1)` on the detector.
    pub fn pixel_ray(&self, frame: &FrameSpec, row: usize, col: usize, offset: (f64, f64)) -> Result<Ray> {
        if row >= self.rows || col >= self.cols {
            return Err(invalid(format!(
                "pixel ({row}, {col}) outside {}x{} detector",
                self.rows, self.cols
            )));
        }
        let pose = self.pose(frame.angle_deg);
        let (u, v) = self.detector_offset(row as f64 + offset.0, col as f64 + offset.1);
        let target = pose.detector_center + pose.u_axis * u + pose.v_axis * v;
        Ray::new(pose.source, target - pose.source)
    }

    /// Unit directions through every pixel center, row-major.
    pub fn pixel_directions(&self, pose: &FramePose) -> Vec<Vector3<f64>> {
        let mut dirs = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (u, v) = self.detector_offset(r as f64 + 0.5, c as f64 + 0.5);
                let d = pose.detector_center + pose.u_axis * u + pose.v_axis * v - pose.source;
                dirs.push(d.normalize());
            }
        }
        dirs
    }

    /// Key-value lines describing the geometry (no per-frame records).
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sod = {}", self.sod);
        let _ = writeln!(s, "sdd = {}", self.sdd);
        let _ = writeln!(s, "rows = {}", self.rows);
        let _ = writeln!(s, "cols = {}", self.cols);
        let _ = writeln!(s, "du = {}", self.du);
        let _ = writeln!(s, "dv = {}", self.dv);
        let _ = writeln!(s, "arc_deg = {}", self.arc_deg);
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "angle0 = {}", self.angle0_deg);
        let _ = writeln!(s, "spin = {}", self.spin.as_str());
        s
    }

    /// Reads geometry keys from `kv`, leaving other keys for the caller.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let g = Self {
            sod: kv.take("sod")?.unwrap_or(d.sod),
            sdd: kv.take("sdd")?.unwrap_or(d.sdd),
            rows: kv.take("rows")?.unwrap_or(d.rows),
            cols: kv.take("cols")?.unwrap_or(d.cols),
            du: kv.take("du")?.unwrap_or(d.du),
            dv: kv.take("dv")?.unwrap_or(d.dv),
            arc_deg: kv.take("arc_deg")?.unwrap_or(d.arc_deg),
            frames: kv.take("frames")?.unwrap_or(d.frames),
            angle0_deg: kv.take("angle0")?.unwrap_or(d.angle0_deg),
            spin: kv.take("spin")?.unwrap_or(d.spin),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let g = Self::from_key_values(&mut kv)?;
        kv.finish()?;
        Ok(g)
    }
}

/// Every frame of the scan with uniform angles and timestamps `t_j = j / T`.
pub fn frame_timestamps(geometry: &ScanGeometry) -> Result<Vec<FrameSpec>> {
    geometry.validate()?;
    (1..=geometry.frames).map(|j| geometry.frame(j)).collect()
}

/// Uniform sparse-view subset `j_k = ⌊(k−1)·T/N⌋ + 1`, `k = 1..N` (1-based indices).
pub fn subsample_views(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(invalid(format!("need 1 <= N <= T, got N={n} T={total}")));
    }
    Ok((1..=n).map(|k| (k - 1) * total / n + 1).collect())
}

/// Frames not chosen by [`subsample_views`], ascending.
pub fn held_out_views(total: usize, n: usize) -> Result<Vec<usize>> {
    let train = subsample_views(total, n)?;
    let mut it = train.iter().peekable();
    Ok((1..=total)
        .filter(|j| {
            if it.peek() == Some(&j) {
                it.next();
                false
            } else {
                true
            }
        })
        .collect())
}

impl std::fmt::Display for FrameSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "frame {} {:.17} {:.17}", self.index, self.angle_deg, self.timestamp)
    }
}

impl std::str::FromStr for FrameSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let bad = || invalid(format!("frame record needs `index angle timestamp`, got `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(FrameSpec {
            index: parts[0].parse().map_err(|_| bad())?,
            angle_deg: parts[1].parse().map_err(|_| bad())?,
            timestamp: parts[2].parse().map_err(|_| bad())?,
        })
    }
}
