//! Cross-domain polar mix-up: swap complementary azimuth sectors between a
//! source frame and a target frame, carrying labels whole and recording which
//! domain each region of the mixed frame came from.

use crate::geometry::Box3d;
use crate::scene::{DomainKind, Frame, PointCloud};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{PI, TAU};

/// Azimuth sector `[start, start + width)` with wraparound; width 2π keeps
/// everything, width 0 nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorMask {
    pub start: f64,
    pub width: f64,
}

impl SectorMask {
    pub fn new(start: f64, width: f64) -> Self {
        Self { start: start.rem_euclid(TAU), width: width.clamp(0.0, TAU) }
    }

    /// The rest of the circle: `[start + width, start + 2π)`.
    pub fn complement(&self) -> Self {
        Self::new(self.start + self.width, TAU - self.width)
    }

    pub fn contains(&self, azimuth: f64) -> bool {
        if self.width >= TAU {
            return true;
        }
        (azimuth - self.start).rem_euclid(TAU) < self.width
    }
}

/// A polar-mixed frame. Per-region provenance is recoverable from the stored
/// sector: azimuths inside it came from the source frame.
#[derive(Debug, Clone)]
pub struct MixedFrame {
    pub cloud: PointCloud,
    pub labels: Vec<(Box3d, DomainKind)>,
    pub theta: f64,
    pub start: f64,
}

impl MixedFrame {
    pub fn source_sector(&self) -> SectorMask {
        SectorMask::new(self.start, self.theta)
    }

    /// Which domain owns a given azimuth of the mixed frame.
    pub fn domain_at(&self, azimuth: f64) -> DomainKind {
        if self.source_sector().contains(azimuth.rem_euclid(TAU)) {
            DomainKind::Source
        } else {
            DomainKind::Target
        }
    }
}

/// Keep the points whose azimuth lies in the sector, and the labels whose
/// center azimuth does. Boxes straddling the cut stay whole.
pub fn sector_filter(
    cloud: &PointCloud,
    labels: &[Box3d],
    mask: SectorMask,
) -> (PointCloud, Vec<Box3d>) {
    let points = (0..cloud.len())
        .filter(|&i| mask.contains(cloud.azimuth(i)))
        .map(|i| cloud.points[i])
        .collect();
    let labels = labels
        .iter()
        .filter(|b| mask.contains(b.center_azimuth()))
        .cloned()
        .collect();
    (PointCloud { points }, labels)
}

/// Swap complementary sectors: the mixed frame is the source's
/// `[start, start+θ)` sector followed by the target's complement.
pub fn polar_mix(source: &Frame, target: &Frame, theta: f64, start: f64) -> MixedFrame {
    let src_mask = SectorMask::new(start, theta);
    let tgt_mask = src_mask.complement();
    let (mut cloud, src_labels) = sector_filter(&source.cloud, &source.labels, src_mask);
    let (tgt_cloud, tgt_labels) = sector_filter(&target.cloud, &target.labels, tgt_mask);
    cloud.points.extend_from_slice(&tgt_cloud.points);
    let mut labels: Vec<(Box3d, DomainKind)> =
        src_labels.into_iter().map(|b| (b, DomainKind::Source)).collect();
    labels.extend(tgt_labels.into_iter().map(|b| (b, DomainKind::Target)));
    MixedFrame { cloud, labels, theta: theta.clamp(0.0, TAU), start: start.rem_euclid(TAU) }
}

/// Random mix geometry for one iteration: θ uniform in [π/2, 3π/2], start
/// uniform in [0, 2π).
pub fn sample_theta(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let theta = rng.gen_range(PI / 2.0..=3.0 * PI / 2.0);
    let start = rng.gen_range(0.0..TAU);
    (theta, start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    fn point_at(azimuth: f64, r: f64) -> [f32; 4] {
        [(r * azimuth.cos()) as f32, (r * azimuth.sin()) as f32, 0.0, 0.5]
    }

    fn frame_with(domain: DomainKind, azimuths: &[f64], labels: Vec<Box3d>) -> Frame {
        Frame {
            id: format!("{}_test", domain.as_str()),
            domain,
            cloud: PointCloud { points: azimuths.iter().map(|&a| point_at(a, 10.0)).collect() },
            labels,
            camera: None,
        }
    }

    fn box_at(azimuth: f64, r: f64) -> Box3d {
        Box3d::new(r * azimuth.cos(), r * azimuth.sin(), -1.0, 4.0, 1.8, 1.5, 0.3, 0).unwrap()
    }

    #[test]
    fn full_and_empty_sectors() {
        let all = SectorMask::new(1.0, TAU);
        let none = SectorMask::new(1.0, 0.0);
        for az in [0.0, 1.0, 2.0, 4.0, 6.0] {
            assert!(all.contains(az));
            assert!(!none.contains(az));
        }
    }

    #[test]
    fn membership_half_circle() {
        let m = SectorMask::new(0.0, PI);
        assert!(m.contains(deg(45.0)));
        assert!(!m.contains(deg(225.0)));
        assert!(m.contains(0.0));
        assert!(!m.contains(PI));
    }

    #[test]
    fn membership_wraps_around_zero() {
        let m = SectorMask::new(deg(300.0), deg(120.0));
        assert!(m.contains(deg(330.0)));
        assert!(m.contains(deg(30.0)));
        assert!(!m.contains(deg(90.0)));
        let c = m.complement();
        assert!((c.start - deg(60.0)).abs() < 1e-12);
        assert!(c.contains(deg(90.0)));
        assert!(!c.contains(deg(30.0)));
    }

    #[test]
    fn sector_filter_keeps_points_and_labels_by_azimuth() {
        let cloud = PointCloud {
            points: vec![point_at(deg(45.0), 10.0), point_at(deg(225.0), 10.0)],
        };
        let labels = vec![box_at(deg(10.0), 8.0), box_at(deg(200.0), 8.0)];
        let (pts, labs) = sector_filter(&cloud, &labels, SectorMask::new(0.0, PI));
        assert_eq!(pts.len(), 1);
        assert!((pts.azimuth(0) - deg(45.0)).abs() < 1e-6);
        assert_eq!(labs.len(), 1);
        assert!((labs[0].center_azimuth() - deg(10.0)).abs() < 1e-9);
    }

    #[test]
    fn theta_zero_yields_target_and_tau_yields_source() {
        let src = frame_with(DomainKind::Source, &[deg(45.0), deg(225.0)], vec![box_at(1.0, 9.0)]);
        let tgt = frame_with(DomainKind::Target, &[deg(90.0), deg(270.0)], vec![box_at(4.0, 9.0)]);

        let m = polar_mix(&src, &tgt, 0.0, 1.3);
        assert_eq!(m.cloud.points, tgt.cloud.points);
        assert_eq!(m.labels.len(), 1);
        assert_eq!(m.labels[0].1, DomainKind::Target);

        let m = polar_mix(&src, &tgt, TAU, 1.3);
        assert_eq!(m.cloud.points, src.cloud.points);
        assert_eq!(m.labels.len(), 1);
        assert_eq!(m.labels[0].1, DomainKind::Source);
    }

    #[test]
    fn half_sector_swap_example() {
        let src = frame_with(DomainKind::Source, &[deg(45.0), deg(225.0)], vec![]);
        let tgt = frame_with(DomainKind::Target, &[deg(90.0), deg(270.0)], vec![]);
        let m = polar_mix(&src, &tgt, PI, 0.0);
        assert_eq!(m.cloud.len(), 2);
        let az: Vec<f64> = (0..2).map(|i| m.cloud.azimuth(i)).collect();
        assert!((az[0] - deg(45.0)).abs() < 1e-6, "source point at 45°");
        assert!((az[1] - deg(270.0)).abs() < 1e-6, "target point at 270°");
        assert_eq!(m.domain_at(deg(45.0)), DomainKind::Source);
        assert_eq!(m.domain_at(deg(270.0)), DomainKind::Target);
    }

    #[test]
    fn sectors_partition_the_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src_az: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..TAU)).collect();
        let tgt_az: Vec<f64> = (0..150).map(|_| rng.gen_range(0.0..TAU)).collect();
        let src = frame_with(DomainKind::Source, &src_az, vec![]);
        let tgt = frame_with(DomainKind::Target, &tgt_az, vec![]);
        let (theta, start) = (2.1, 5.9);
        let mask = SectorMask::new(start, theta);
        let comp = mask.complement();

        let in_src = (0..src.cloud.len()).filter(|&i| mask.contains(src.cloud.azimuth(i))).count();
        let in_tgt = (0..tgt.cloud.len()).filter(|&i| comp.contains(tgt.cloud.azimuth(i))).count();
        let m = polar_mix(&src, &tgt, theta, start);
        assert_eq!(m.cloud.len(), in_src + in_tgt);

        for i in 0..m.cloud.len() {
            let az = m.cloud.azimuth(i);
            assert_ne!(mask.contains(az), comp.contains(az), "partition broken at {az}");
        }
    }

    #[test]
    fn self_mix_reconstructs_the_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let az: Vec<f64> = (0..300).map(|_| rng.gen_range(0.0..TAU)).collect();
        let a = frame_with(DomainKind::Source, &az, vec![]);
        for theta in [0.7, PI, 5.0] {
            let m = polar_mix(&a, &a, theta, 2.0);
            let mut got = m.cloud.points.clone();
            let mut want = a.cloud.points.clone();
            let key = |p: &[f32; 4]| (p[0].to_bits(), p[1].to_bits(), p[2].to_bits());
            got.sort_by_key(key);
            want.sort_by_key(key);
            assert_eq!(got, want, "theta {theta}");
        }
    }

    #[test]
    fn straddling_box_stays_whole_with_center_origin() {
        // Long box centered at 10° with yaw across the 0° cut.
        let b = Box3d::new(9.8, 1.7, -1.0, 6.0, 1.8, 1.5, 1.4, 0).unwrap();
        let src = frame_with(DomainKind::Source, &[deg(10.0)], vec![b.clone()]);
        let tgt = frame_with(DomainKind::Target, &[deg(200.0)], vec![]);
        let m = polar_mix(&src, &tgt, PI, 0.0);
        assert_eq!(m.labels.len(), 1);
        let (kept, origin) = &m.labels[0];
        assert_eq!(origin, &DomainKind::Source);
        assert_eq!(kept.l, 6.0, "box not clipped");
        // Some of its footprint hangs below the cut even though it is kept.
        let corners = crate::geometry::bev_corners(kept);
        assert!(corners.vertices.iter().any(|c| c[1] < 0.0));
    }

    #[test]
    fn sample_theta_ranges_and_reproducibility() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_theta(&mut a), sample_theta(&mut b));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let (theta, start) = sample_theta(&mut rng);
            assert!((PI / 2.0..=3.0 * PI / 2.0).contains(&theta));
            assert!((0.0..TAU).contains(&start));
            sum += theta;
        }
        let mean = sum / 10_000.0;
        assert!(mean > 0.95 * PI && mean < 1.05 * PI, "mean {mean}");
    }
}
