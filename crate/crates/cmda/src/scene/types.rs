use crate::geometry::Box3d;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}: {what}")]
    Parse { offset: u64, what: String },
    #[error("unsupported frame version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("invalid domain spec: {0}")]
    Spec(String),
}

/// Unified crop range all clouds live in: [xmin, ymin, zmin, xmax, ymax, zmax].
pub const UNIFIED_RANGE: [f64; 6] = [-75.2, -75.2, -2.0, 75.2, 75.2, 4.0];

/// Ground plane height in sensor coordinates (sensor is the origin).
pub const GROUND_Z: f64 = -1.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainKind {
    Source,
    Target,
}

impl DomainKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainKind::Source => "source",
            DomainKind::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(DomainKind::Source),
            "target" => Some(DomainKind::Target),
            _ => None,
        }
    }
}

/// Points as (x, y, z, intensity); f32 storage so disk round-trips are exact.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keep only points inside `range` (inclusive bounds).
    pub fn cropped(&self, range: &[f64; 6]) -> PointCloud {
        let points = self
            .points
            .iter()
            .filter(|p| {
                let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
                x >= range[0] && x <= range[3] && y >= range[1] && y <= range[4] && z >= range[2] && z <= range[5]
            })
            .copied()
            .collect();
        PointCloud { points }
    }

    /// Azimuth of point `i` in [0, 2π).
    pub fn azimuth(&self, i: usize) -> f64 {
        let a = (self.points[i][1] as f64).atan2(self.points[i][0] as f64);
        if a < 0.0 {
            a + 2.0 * std::f64::consts::PI
        } else {
            a
        }
    }
}

/// Single rendered view: H×W×3 image plus projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub height: usize,
    pub width: usize,
    /// Row-major H×W×3, values roughly in [0, 1].
    pub features: Vec<f32>,
    /// 3×3 pinhole matrix, row-major.
    pub intrinsics: [f64; 9],
    /// 4×4 world-to-camera rigid transform, row-major.
    pub extrinsics: [f64; 16],
}

impl CameraFrame {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let base = (row * self.width + col) * 3;
        [self.features[base], self.features[base + 1], self.features[base + 2]]
    }
}

/// One observation: cloud, boxes (empty when unlabeled), optional camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub domain: DomainKind,
    pub cloud: PointCloud,
    pub labels: Vec<Box3d>,
    pub camera: Option<CameraFrame>,
}

/// Everything that differs between the two synthetic LiDAR domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub beam_count: usize,
    /// Per-beam elevation angles, radians.
    pub beam_elevations: Vec<f64>,
    /// Azimuth samples per beam per revolution.
    pub points_per_beam: usize,
    pub object_length_mean: f64,
    pub object_length_std: f64,
    pub object_count_range: (usize, usize),
    /// Fraction of returns randomly discarded.
    pub dropout_rate: f64,
    pub seed: u64,
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.beam_count != self.beam_elevations.len() {
            return Err(SceneError::Spec(format!(
                "beam_count {} != {} elevations",
                self.beam_count,
                self.beam_elevations.len()
            )));
        }
        if !(self.object_length_std > 0.0 && self.object_length_mean > 3.0 * self.object_length_std) {
            return Err(SceneError::Spec(format!(
                "need length_mean > 3·length_std > 0, got mean {} std {}",
                self.object_length_mean, self.object_length_std
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(SceneError::Spec(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.object_count_range.0 > self.object_count_range.1 {
            return Err(SceneError::Spec(format!(
                "object_count_range ({}, {}) inverted",
                self.object_count_range.0, self.object_count_range.1
            )));
        }
        if self.points_per_beam == 0 {
            return Err(SceneError::Spec("points_per_beam must be positive".into()));
        }
        Ok(())
    }

    /// Dense 64-beam domain with long cars.
    pub fn source_preset(seed: u64) -> Self {
        Self {
            beam_count: 64,
            beam_elevations: linspace(-25f64.to_radians(), 3f64.to_radians(), 64),
            points_per_beam: 512,
            object_length_mean: 4.6,
            object_length_std: 0.25,
            object_count_range: (1, 4),
            dropout_rate: 0.02,
            seed,
        }
    }

    /// Sparse 32-beam domain with short cars.
    pub fn target_preset(seed: u64) -> Self {
        Self {
            beam_count: 32,
            beam_elevations: linspace(-25f64.to_radians(), 3f64.to_radians(), 32),
            points_per_beam: 512,
            object_length_mean: 4.0,
            object_length_std: 0.22,
            object_count_range: (1, 4),
            dropout_rate: 0.02,
            seed,
        }
    }
}
