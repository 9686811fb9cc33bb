use super::camera::{default_extrinsics, default_intrinsics, render_camera};
use super::types::{DomainKind, DomainSpec, Frame, PointCloud, SceneError, GROUND_Z, UNIFIED_RANGE};
use crate::geometry::{normalize_yaw, ray_box_entry, Box3d};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Radial band objects are placed in, meters from the sensor.
const OBJECT_RADIUS: (f64, f64) = (6.0, 26.0);
/// Azimuth band objects are placed in (keeps them inside the camera frustum).
const OBJECT_AZIMUTH: (f64, f64) = (-0.85, 0.85);
/// Rays longer than this produce no return.
const MAX_RANGE: f64 = 40.0;
/// Returns are nudged this far along the ray past the entry face, so surface
/// hits land strictly inside the box they belong to.
const SURFACE_NUDGE: f64 = 1e-3;

/// Deterministic per-frame RNG streams. Objects and rays draw from separate
/// streams so changing the beam pattern never changes which objects exist.
fn frame_rngs(spec_seed: u64, frame_index: u64) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
    let mut objects = ChaCha8Rng::seed_from_u64(spec_seed);
    objects.set_stream(frame_index * 4);
    let mut rays = ChaCha8Rng::seed_from_u64(spec_seed);
    rays.set_stream(frame_index * 4 + 1);
    let mut camera = ChaCha8Rng::seed_from_u64(spec_seed);
    camera.set_stream(frame_index * 4 + 2);
    (objects, rays, camera)
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_objects(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<Box3d> {
    let count = rng.gen_range(spec.object_count_range.0..=spec.object_count_range.1);
    let mut boxes: Vec<Box3d> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _attempt in 0..20 {
            let l = (spec.object_length_mean
                + sample_standard_normal(rng).clamp(-3.0, 3.0) * spec.object_length_std)
                .max(0.5);
            let w = 0.44 * l + 0.03 * sample_standard_normal(rng).clamp(-2.0, 2.0);
            let h = 1.5 + 0.08 * sample_standard_normal(rng).clamp(-2.0, 2.0);
            let radius = rng.gen_range(OBJECT_RADIUS.0..OBJECT_RADIUS.1);
            let azimuth = rng.gen_range(OBJECT_AZIMUTH.0..OBJECT_AZIMUTH.1);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let candidate = quantize_box(Box3d {
                x: radius * azimuth.cos(),
                y: radius * azimuth.sin(),
                z: GROUND_Z + h / 2.0,
                l,
                w,
                h,
                yaw: normalize_yaw(yaw),
                class_id: 0,
            });
            let clear = boxes.iter().all(|b| {
                let d = ((candidate.x - b.x).powi(2) + (candidate.y - b.y).powi(2)).sqrt();
                let r_c = (candidate.l.powi(2) + candidate.w.powi(2)).sqrt() / 2.0;
                let r_b = (b.l.powi(2) + b.w.powi(2)).sqrt() / 2.0;
                d > r_c + r_b + 0.5
            });
            if clear {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            // Crowded draw; this frame simply carries fewer objects.
            break;
        }
    }
    boxes
}

/// Round every field through f32 so labels survive the on-disk f32 encoding
/// bit-exactly.
pub fn quantize_box(b: Box3d) -> Box3d {
    Box3d {
        x: b.x as f32 as f64,
        y: b.y as f32 as f64,
        z: b.z as f32 as f64,
        l: b.l as f32 as f64,
        w: b.w as f32 as f64,
        h: b.h as f32 as f64,
        yaw: b.yaw as f32 as f64,
        class_id: b.class_id,
    }
}

fn cast_rays(spec: &DomainSpec, boxes: &[Box3d], rng: &mut ChaCha8Rng) -> PointCloud {
    let mut points = Vec::new();
    for &elevation in &spec.beam_elevations {
        let (es, ec) = elevation.sin_cos();
        for k in 0..spec.points_per_beam {
            let azimuth = 2.0 * std::f64::consts::PI * k as f64 / spec.points_per_beam as f64;
            let (as_, ac) = azimuth.sin_cos();
            let dir = [ec * ac, ec * as_, es];

            let mut best: Option<(f64, bool)> = None;
            if es < -1e-9 {
                let tg = GROUND_Z / es;
                if tg <= MAX_RANGE {
                    best = Some((tg, false));
                }
            }
            for b in boxes {
                if let Some(t) = ray_box_entry([0.0; 3], dir, b) {
                    if t <= MAX_RANGE && best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, true));
                    }
                }
            }
            let Some((t_hit, is_object)) = best else { continue };
            if rng.gen_range(0.0..1.0) < spec.dropout_rate {
                continue;
            }
            let t = if is_object { t_hit + SURFACE_NUDGE } else { t_hit };
            let base: f64 = if is_object { 0.75 } else { 0.22 };
            let intensity = (base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            points.push([
                (t * dir[0]) as f32,
                (t * dir[1]) as f32,
                (t * dir[2]) as f32,
                intensity as f32,
            ]);
        }
    }
    PointCloud { points }.cropped(&UNIFIED_RANGE)
}

/// Generate one frame of the given domain. Deterministic in
/// (spec, frame_index); the beam pattern never influences object placement.
pub fn generate_scene(
    spec: &DomainSpec,
    domain: DomainKind,
    frame_index: u64,
) -> Result<Frame, SceneError> {
    spec.validate()?;
    let (mut objects_rng, mut rays_rng, mut camera_rng) = frame_rngs(spec.seed, frame_index);
    let labels = sample_objects(spec, &mut objects_rng);
    let cloud = cast_rays(spec, &labels, &mut rays_rng);
    let id = format!("{}_{:06}", domain.as_str(), frame_index);
    let camera = render_camera(&labels, default_intrinsics(), default_extrinsics(), &mut camera_rng);
    Ok(Frame { id, domain, cloud, labels, camera: Some(camera) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::points_in_box;

    #[test]
    fn zero_object_spec_gives_ground_only() {
        let mut spec = DomainSpec::source_preset(7);
        spec.object_count_range = (0, 0);
        let f = generate_scene(&spec, DomainKind::Source, 0).unwrap();
        assert!(f.labels.is_empty());
        assert!(!f.cloud.is_empty());
        // Every return lies on the ground plane.
        for p in &f.cloud.points {
            assert!((p[2] as f64 - GROUND_Z).abs() < 1e-3, "point off ground: {:?}", p);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = DomainSpec::source_preset(9);
        let a = generate_scene(&spec, DomainKind::Source, 3).unwrap();
        let b = generate_scene(&spec, DomainKind::Source, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_points_inside_unified_range() {
        let spec = DomainSpec::target_preset(11);
        for idx in 0..5 {
            let f = generate_scene(&spec, DomainKind::Target, idx).unwrap();
            assert_eq!(f.cloud.cropped(&UNIFIED_RANGE).len(), f.cloud.len());
        }
    }

    #[test]
    fn beam_halving_roughly_halves_object_point_counts() {
        let dense = DomainSpec::source_preset(13);
        let mut sparse = dense.clone();
        sparse.beam_count = 32;
        sparse.beam_elevations = super::super::types::linspace(
            -25f64.to_radians(),
            3f64.to_radians(),
            32,
        );
        let mut ratios = Vec::new();
        for idx in 0..100 {
            let fd = generate_scene(&dense, DomainKind::Source, idx).unwrap();
            let fs = generate_scene(&sparse, DomainKind::Source, idx).unwrap();
            assert_eq!(fd.labels.len(), fs.labels.len(), "object stream must not depend on beams");
            for (bd, bs) in fd.labels.iter().zip(&fs.labels) {
                assert_eq!(bd, bs);
                let nd = points_in_box(&fd.cloud.points, bd).len();
                let ns = points_in_box(&fs.cloud.points, bs).len();
                if nd >= 10 {
                    ratios.push(ns as f64 / nd as f64);
                }
            }
        }
        assert!(ratios.len() > 50, "too few well-observed objects: {}", ratios.len());
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[ratios.len() / 2];
        assert!((0.35..=0.65).contains(&median), "median ratio {}", median);
    }

    #[test]
    fn labeled_objects_rarely_empty() {
        let spec = DomainSpec::target_preset(17);
        let (mut total, mut empty) = (0usize, 0usize);
        for idx in 0..200 {
            let f = generate_scene(&spec, DomainKind::Target, idx).unwrap();
            for b in &f.labels {
                total += 1;
                if points_in_box(&f.cloud.points, b).is_empty() {
                    empty += 1;
                }
            }
        }
        assert!(total > 200);
        assert!(
            (empty as f64) < 0.05 * total as f64,
            "{} of {} labels have no points",
            empty,
            total
        );
    }

    #[test]
    fn object_points_belong_to_their_box() {
        let spec = DomainSpec::source_preset(19);
        let f = generate_scene(&spec, DomainKind::Source, 1).unwrap();
        let object_points: usize =
            f.cloud.points.iter().filter(|p| p[3] > 0.5).count();
        let contained: usize =
            f.labels.iter().map(|b| points_in_box(&f.cloud.points, b).len()).sum();
        // High-intensity returns are exactly the box hits; the nudge keeps
        // them inside, and boxes never overlap.
        assert_eq!(object_points, contained);
        assert!(object_points > 0);
    }
}
