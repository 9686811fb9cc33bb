//! Oriented 3D boxes: corners, rotated overlap, BEV/3D IoU, containment.
//!
//! Rotated intersection is exact convex clipping, so identical inputs give
//! identical IoU on every run; sampling-based oracles exist only in tests.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("box sizes must be positive, got l={l} w={w} h={h}")]
    InvalidSize { l: f64, w: f64, h: f64 },
}

/// Oriented 3D box: center, size, heading. `l` runs along the heading
/// direction, `w` across it, `h` up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3d {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_id: u32,
}

/// Wrap an angle into [−π, π).
pub fn normalize_yaw(yaw: f64) -> f64 {
    use std::f64::consts::PI;
    let wrapped = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can land exactly on 2π for inputs like −π − ε.
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

impl Box3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x: f64,
        y: f64,
        z: f64,
        l: f64,
        w: f64,
        h: f64,
        yaw: f64,
        class_id: u32,
    ) -> Result<Self, GeomError> {
        if !(l > 0.0 && w > 0.0 && h > 0.0) {
            return Err(GeomError::InvalidSize { l, w, h });
        }
        Ok(Self { x, y, z, l, w, h, yaw: normalize_yaw(yaw), class_id })
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn footprint_area(&self) -> f64 {
        self.l * self.w
    }

    /// Azimuth of the box center seen from the sensor origin, in [0, 2π).
    pub fn center_azimuth(&self) -> f64 {
        let a = self.y.atan2(self.x);
        if a < 0.0 {
            a + 2.0 * std::f64::consts::PI
        } else {
            a
        }
    }

    /// Box rotated about the world origin by `angle` (centers move, yaw shifts).
    pub fn rotated_about_origin(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
            yaw: normalize_yaw(self.yaw + angle),
            ..*self
        }
    }
}

/// Convex polygon in the BEV plane, vertices counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon2d {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon2d {
    /// Signed shoelace area; positive for CCW ordering.
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        if v.len() < 3 {
            return 0.0;
        }
        let mut twice = 0.0;
        for i in 0..v.len() {
            let j = (i + 1) % v.len();
            twice += v[i][0] * v[j][1] - v[j][0] * v[i][1];
        }
        twice / 2.0
    }
}

/// Four BEV footprint corners of a box, counter-clockwise.
pub fn bev_corners(b: &Box3d) -> Polygon2d {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    // Local corners CCW starting front-right.
    let local = [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]];
    let vertices = local
        .iter()
        .map(|&[lx, ly]| [b.x + c * lx - s * ly, b.y + s * lx + c * ly])
        .collect();
    Polygon2d { vertices }
}

/// Sutherland–Hodgman clip of a convex `subject` against a convex CCW `clip`.
pub fn convex_clip(subject: &Polygon2d, clip: &Polygon2d) -> Polygon2d {
    let mut output = subject.vertices.clone();
    let cv = &clip.vertices;
    for i in 0..cv.len() {
        if output.is_empty() {
            break;
        }
        let a = cv[i];
        let b = cv[(i + 1) % cv.len()];
        let input = std::mem::take(&mut output);
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (cin, pin) = (inside(cur), inside(prev));
            if cin {
                if !pin {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if pin {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    Polygon2d { vertices: output }
}

fn line_intersection(p1: [f64; 2], p2: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = [p2[0] - p1[0], p2[1] - p1[1]];
    let d2 = [b[0] - a[0], b[1] - a[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom.abs() < 1e-300 {
        return p1;
    }
    let t = ((a[0] - p1[0]) * d2[1] - (a[1] - p1[1]) * d2[0]) / denom;
    [p1[0] + t * d1[0], p1[1] + t * d1[1]]
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection_area(a: &Box3d, b: &Box3d) -> f64 {
    let inter = convex_clip(&bev_corners(a), &bev_corners(b));
    inter.area().max(0.0)
}

/// BEV IoU of two oriented boxes, in [0, 1].
pub fn iou_bev(a: &Box3d, b: &Box3d) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.footprint_area() + b.footprint_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// 3D IoU: footprint intersection × vertical overlap over volume union.
pub fn iou_3d(a: &Box3d, b: &Box3d) -> f64 {
    let z_lo = (a.z - a.h / 2.0).max(b.z - b.h / 2.0);
    let z_hi = (a.z + a.h / 2.0).min(b.z + b.h / 2.0);
    let dz = z_hi - z_lo;
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Distance along `dir` from `origin` to the entry face of `b`, if the ray
/// hits it in front of the origin (slab test in the box frame).
pub fn ray_box_entry(origin: [f64; 3], dir: [f64; 3], b: &Box3d) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let rel = [origin[0] - b.x, origin[1] - b.y, origin[2] - b.z];
    let o = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::MAX;
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let t1 = (-half[k] - o[k]) / d[k];
        let t2 = (half[k] - o[k]) / d[k];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_enter > t_exit {
            return None;
        }
    }
    (t_enter > 1e-6).then_some(t_enter)
}

/// Indices of points inside the rotated box; boundary counts as inside.
pub fn points_in_box(points: &[[f32; 4]], b: &Box3d) -> Vec<usize> {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw, hh) = (b.l / 2.0, b.w / 2.0, b.h / 2.0);
    points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let dx = p[0] as f64 - b.x;
            let dy = p[1] as f64 - b.y;
            let dz = p[2] as f64 - b.z;
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            (lx.abs() <= hl && ly.abs() <= hw && dz.abs() <= hh).then_some(i)
        })
        .collect()
}
