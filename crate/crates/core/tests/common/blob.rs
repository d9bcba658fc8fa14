//! Static Gaussian blob with exact cone-beam projections.

use nalgebra::Vector3;
use radsplat::{frame_timestamps, AttenuationVolume, ProjectionDataset, ScanGeometry};

pub const SIGMA: f64 = 10.0;
pub const PEAK: f64 = 0.05;

pub fn blob_center() -> Vector3<f64> {
    Vector3::new(4.0, -6.0, 3.0)
}

/// Exact line integral of an isotropic Gaussian blob.
pub fn blob_projection(g: &ScanGeometry, scale: f64) -> ProjectionDataset {
    let frames = frame_timestamps(g).unwrap();
    let c = blob_center();
    let images = frames
        .iter()
        .map(|f| {
            let pose = g.pose(f.angle_deg);
            g.pixel_directions(&pose)
                .iter()
                .map(|d| {
                    let rel = c - pose.source;
                    let perp2 = rel.norm_squared() - rel.dot(d).powi(2);
                    (scale * PEAK * SIGMA * (2.0 * std::f64::consts::PI).sqrt() * (-perp2 / (2.0 * SIGMA * SIGMA)).exp()) as f32
                })
                .collect()
        })
        .collect();
    ProjectionDataset::new(g.clone(), frames, images).unwrap()
}

pub fn geometry() -> ScanGeometry {
    ScanGeometry {
        frames: 60,
        ..ScanGeometry::default()
    }
}

pub fn centroid(v: &AttenuationVolume, floor: f32) -> Vector3<f64> {
    let [nx, ny, nz] = v.grid.dims;
    let (mut acc, mut w) = (Vector3::zeros(), 0.0);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let val = v.get(i, j, k);
                if val >= floor {
                    acc += v.grid.voxel_center(i, j, k) * val as f64;
                    w += val as f64;
                }
            }
        }
    }
    acc / w
}
