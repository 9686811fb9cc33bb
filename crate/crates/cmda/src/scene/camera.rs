use super::types::CameraFrame;
use crate::geometry::{ray_box_entry, Box3d};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const IMAGE_SIZE: usize = 64;
/// Objects closer than this along the optical axis are not drawn.
const NEAR_PLANE: f64 = 1.0;
/// Background noise stays strictly below this.
pub const NOISE_CEILING: f32 = 0.05;

/// Pinhole matrix for the default 64×64 view (focal 24 px ⇒ ±53° field).
pub fn default_intrinsics() -> [f64; 9] {
    let f = 24.0;
    let c = IMAGE_SIZE as f64 / 2.0;
    [f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0]
}

/// World-to-camera transform: camera at the sensor origin looking along +x,
/// with image right = −y and image down = −z.
pub fn default_extrinsics() -> [f64; 16] {
    [
        0.0, -1.0, 0.0, 0.0, //
        0.0, 0.0, -1.0, 0.0, //
        1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ]
}

/// World point → camera coordinates (x right, y down, z forward).
pub fn world_to_camera(extrinsics: &[f64; 16], p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for r in 0..3 {
        out[r] = extrinsics[r * 4] * p[0]
            + extrinsics[r * 4 + 1] * p[1]
            + extrinsics[r * 4 + 2] * p[2]
            + extrinsics[r * 4 + 3];
    }
    out
}

/// Camera point → world, inverting the rigid transform.
pub fn camera_to_world(extrinsics: &[f64; 16], p: [f64; 3]) -> [f64; 3] {
    let d = [p[0] - extrinsics[3], p[1] - extrinsics[7], p[2] - extrinsics[11]];
    let mut out = [0.0; 3];
    for r in 0..3 {
        // Rᵀ row r = column r of R.
        out[r] = extrinsics[r] * d[0] + extrinsics[4 + r] * d[1] + extrinsics[8 + r] * d[2];
    }
    out
}

/// Project a camera-space point to pixel coordinates (col, row) and depth.
pub fn project(intrinsics: &[f64; 9], cam: [f64; 3]) -> Option<([f64; 2], f64)> {
    if cam[2] <= 0.0 {
        return None;
    }
    let u = intrinsics[0] * cam[0] / cam[2] + intrinsics[2];
    let v = intrinsics[4] * cam[1] / cam[2] + intrinsics[5];
    Some(([u, v], cam[2]))
}

/// Pixel (col, row) at `depth` along the optical axis → camera-space point.
pub fn unproject(intrinsics: &[f64; 9], u: f64, v: f64, depth: f64) -> [f64; 3] {
    [(u - intrinsics[2]) / intrinsics[0] * depth, (v - intrinsics[5]) / intrinsics[4] * depth, depth]
}

/// Camera center in world coordinates: C = −Rᵀt.
fn camera_center(extrinsics: &[f64; 16]) -> [f64; 3] {
    camera_to_world(extrinsics, [0.0; 3])
}

/// Rotate a camera-space direction into world space (no translation).
fn camera_dir_to_world(extrinsics: &[f64; 16], d: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for r in 0..3 {
        out[r] = extrinsics[r] * d[0] + extrinsics[4 + r] * d[1] + extrinsics[8 + r] * d[2];
    }
    out
}

/// Paint the exact silhouette of each visible box (nearest box wins per
/// pixel, so occlusion is honored) with an instance-coded flat color, on top
/// of low background noise.
pub fn render_camera(
    labels: &[Box3d],
    intrinsics: [f64; 9],
    extrinsics: [f64; 16],
    rng: &mut ChaCha8Rng,
) -> CameraFrame {
    let n = IMAGE_SIZE;
    let mut features = vec![0.0f32; n * n * 3];
    for v in features.iter_mut() {
        *v = rng.gen_range(0.0..0.02);
    }
    let center = camera_center(&extrinsics);
    for row in 0..n {
        for col in 0..n {
            let dir_cam = unproject(&intrinsics, col as f64 + 0.5, row as f64 + 0.5, 1.0);
            let dir = camera_dir_to_world(&extrinsics, dir_cam);
            let mut hit: Option<(f64, usize)> = None;
            for (idx, b) in labels.iter().enumerate() {
                if let Some(t) = ray_box_entry(center, dir, b) {
                    if t >= NEAR_PLANE && hit.map_or(true, |(bt, _)| t < bt) {
                        hit = Some((t, idx));
                    }
                }
            }
            if let Some((_, idx)) = hit {
                let instance_code = 0.3 + 0.5 * ((idx as f64 * 0.37) % 1.0);
                let class_code = 0.25 + 0.1 * labels[idx].class_id as f64;
                let base = (row * n + col) * 3;
                features[base] = (0.85 + rng.gen_range(-0.02..0.02)) as f32;
                features[base + 1] = (instance_code + rng.gen_range(-0.02..0.02)) as f32;
                features[base + 2] = (class_code + rng.gen_range(-0.02..0.02)) as f32;
            }
        }
    }
    CameraFrame { height: n, width: n, features, intrinsics, extrinsics }
}
