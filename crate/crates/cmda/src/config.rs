//! Flat sectioned key=value experiment configuration. Every key has a
//! default; unknown sections or keys are rejected; `parse ∘ serialize` is a
//! fixed point.

use crate::camera_bev::CameraBevConfig;
use crate::detect::HeadConfig;
use crate::lidar_bev::{LidarEncoderConfig, VoxelGridSpec};
use crate::nn::fnv1a64;
use crate::scene::{linspace, DomainSpec, UNIFIED_RANGE};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub seed: u64,
    pub source_beams: usize,
    pub target_beams: usize,
    pub train_frames: usize,
    pub eval_frames: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { seed: 7, source_beams: 64, target_beams: 32, train_frames: 200, eval_frames: 40 }
    }
}

impl DatasetSection {
    /// Dense-domain spec with the configured beam count; scene randomness is
    /// decoupled from the training seed by a per-domain tag.
    pub fn source_spec(&self) -> DomainSpec {
        let mut spec = DomainSpec::source_preset(self.seed ^ fnv1a64(b"domain.source"));
        spec.beam_count = self.source_beams;
        spec.beam_elevations = beam_fan(self.source_beams);
        spec
    }

    pub fn target_spec(&self) -> DomainSpec {
        let mut spec = DomainSpec::target_preset(self.seed ^ fnv1a64(b"domain.target"));
        spec.beam_count = self.target_beams;
        spec.beam_elevations = beam_fan(self.target_beams);
        spec
    }
}

fn beam_fan(beams: usize) -> Vec<f64> {
    linspace(-25f64.to_radians(), 3f64.to_radians(), beams.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub voxel_size_xy: f64,
    pub voxel_size_z: f64,
    pub lidar_hidden: usize,
    pub bev_channels_per_voxel: usize,
    pub camera_hidden: usize,
    pub depth_bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub feature_width: usize,
    pub disc_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            voxel_size_xy: 2.35,
            voxel_size_z: 1.5,
            lidar_hidden: 16,
            bev_channels_per_voxel: 8,
            camera_hidden: 8,
            depth_bins: 16,
            depth_min: 1.0,
            depth_max: 60.0,
            feature_width: 32,
            disc_hidden: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_det: f64,
    pub lambda_cmki: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { epochs: 16, batch_size: 2, learning_rate: 0.01, lambda_det: 1.0, lambda_cmki: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftrainSection {
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_det: f64,
    pub lambda_d: f64,
    pub lambda_ent: f64,
    pub t_pos: f64,
    pub disc_score: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub refresh_period: usize,
}

impl Default for SelftrainSection {
    fn default() -> Self {
        Self {
            rounds: 4,
            epochs: 1,
            batch_size: 2,
            learning_rate: 0.005,
            lambda_det: 1.0,
            lambda_d: 0.1,
            lambda_ent: 0.01,
            t_pos: 0.6,
            disc_score: 0.3,
            theta_min: std::f64::consts::FRAC_PI_2,
            theta_max: 3.0 * std::f64::consts::FRAC_PI_2,
            refresh_period: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub iou_thresh: f64,
    pub score_thresh: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { iou_thresh: 0.7, score_thresh: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub selftrain: SelftrainSection,
    pub eval: EvalSection,
}

/// Derived, validated model geometry shared by training and inference.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub grid: VoxelGridSpec,
    pub lidar: LidarEncoderConfig,
    pub camera: CameraBevConfig,
    pub head: HeadConfig,
    pub disc_hidden: usize,
}

impl ExperimentConfig {
    /// Resolve the model section against the unified range and check the
    /// cross-stream shape contract (LiDAR BEV width == Z · camera channels).
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        let grid = VoxelGridSpec::new(
            UNIFIED_RANGE,
            [m.voxel_size_xy, m.voxel_size_xy, m.voxel_size_z],
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let (_, _, z) = grid.dims();
        let zc = z * m.bev_channels_per_voxel;
        let lidar = LidarEncoderConfig {
            in_channels: z * crate::lidar_bev::RAW_CHANNELS,
            hidden: m.lidar_hidden,
            out_channels: zc,
        };
        let camera = CameraBevConfig {
            hidden: m.camera_hidden,
            feature_channels: m.bev_channels_per_voxel,
            depth_bins: m.depth_bins,
            depth_min: m.depth_min,
            depth_max: m.depth_max,
        };
        let head = HeadConfig { in_channels: zc, feature_width: m.feature_width };
        for (name, v) in [
            ("lidar_hidden", m.lidar_hidden),
            ("bev_channels_per_voxel", m.bev_channels_per_voxel),
            ("camera_hidden", m.camera_hidden),
            ("depth_bins", m.depth_bins),
            ("feature_width", m.feature_width),
            ("disc_hidden", m.disc_hidden),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(m.depth_max > m.depth_min && m.depth_min > 0.0) {
            return Err(ConfigError::Invalid("depth bin range must be increasing".into()));
        }
        Ok(ModelConfig { grid, lidar, camera, head, disc_hidden: m.disc_hidden })
    }
}

macro_rules! set_key {
    ($section:expr, $key:expr, $value:expr, $line:expr; $($name:literal => $field:expr),+ $(,)?) => {
        match $key {
            $($name => {
                $field = $value.parse().map_err(|_| ConfigError::Parse {
                    line: $line,
                    msg: format!("cannot parse {:?} for key {}", $value, $name),
                })?;
            })+
            other => {
                return Err(ConfigError::Parse {
                    line: $line,
                    msg: format!("unknown key {other} in [{}]", $section),
                })
            }
        }
    };
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if !["dataset", "model", "pretrain", "selftrain", "eval"].contains(&name) {
                return Err(ConfigError::Parse { line, msg: format!("unknown section [{name}]") });
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Parse { line, msg: format!("expected key=value, got {trimmed:?}") });
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(ref sec) = section else {
            return Err(ConfigError::Parse { line, msg: "key before any [section]".into() });
        };
        match sec.as_str() {
            "dataset" => set_key!("dataset", key, value, line;
                "seed" => cfg.dataset.seed,
                "source_beams" => cfg.dataset.source_beams,
                "target_beams" => cfg.dataset.target_beams,
                "train_frames" => cfg.dataset.train_frames,
                "eval_frames" => cfg.dataset.eval_frames,
            ),
            "model" => set_key!("model", key, value, line;
                "voxel_size_xy" => cfg.model.voxel_size_xy,
                "voxel_size_z" => cfg.model.voxel_size_z,
                "lidar_hidden" => cfg.model.lidar_hidden,
                "bev_channels_per_voxel" => cfg.model.bev_channels_per_voxel,
                "camera_hidden" => cfg.model.camera_hidden,
                "depth_bins" => cfg.model.depth_bins,
                "depth_min" => cfg.model.depth_min,
                "depth_max" => cfg.model.depth_max,
                "feature_width" => cfg.model.feature_width,
                "disc_hidden" => cfg.model.disc_hidden,
            ),
            "pretrain" => set_key!("pretrain", key, value, line;
                "epochs" => cfg.pretrain.epochs,
                "batch_size" => cfg.pretrain.batch_size,
                "learning_rate" => cfg.pretrain.learning_rate,
                "lambda_det" => cfg.pretrain.lambda_det,
                "lambda_cmki" => cfg.pretrain.lambda_cmki,
            ),
            "selftrain" => set_key!("selftrain", key, value, line;
                "rounds" => cfg.selftrain.rounds,
                "epochs" => cfg.selftrain.epochs,
                "batch_size" => cfg.selftrain.batch_size,
                "learning_rate" => cfg.selftrain.learning_rate,
                "lambda_det" => cfg.selftrain.lambda_det,
                "lambda_d" => cfg.selftrain.lambda_d,
                "lambda_ent" => cfg.selftrain.lambda_ent,
                "t_pos" => cfg.selftrain.t_pos,
                "disc_score" => cfg.selftrain.disc_score,
                "theta_min" => cfg.selftrain.theta_min,
                "theta_max" => cfg.selftrain.theta_max,
                "refresh_period" => cfg.selftrain.refresh_period,
            ),
            "eval" => set_key!("eval", key, value, line;
                "iou_thresh" => cfg.eval.iou_thresh,
                "score_thresh" => cfg.eval.score_thresh,
            ),
            _ => unreachable!("section names validated above"),
        }
    }
    Ok(cfg)
}

pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let d = &cfg.dataset;
    let m = &cfg.model;
    let p = &cfg.pretrain;
    let s = &cfg.selftrain;
    let e = &cfg.eval;
    format!(
        "[dataset]\n\
         seed = {}\n\
         source_beams = {}\n\
         target_beams = {}\n\
         train_frames = {}\n\
         eval_frames = {}\n\
         \n\
         [model]\n\
         voxel_size_xy = {}\n\
         voxel_size_z = {}\n\
         lidar_hidden = {}\n\
         bev_channels_per_voxel = {}\n\
         camera_hidden = {}\n\
         depth_bins = {}\n\
         depth_min = {}\n\
         depth_max = {}\n\
         feature_width = {}\n\
         disc_hidden = {}\n\
         \n\
         [pretrain]\n\
         epochs = {}\n\
         batch_size = {}\n\
         learning_rate = {}\n\
         lambda_det = {}\n\
         lambda_cmki = {}\n\
         \n\
         [selftrain]\n\
         rounds = {}\n\
         epochs = {}\n\
         batch_size = {}\n\
         learning_rate = {}\n\
         lambda_det = {}\n\
         lambda_d = {}\n\
         lambda_ent = {}\n\
         t_pos = {}\n\
         disc_score = {}\n\
         theta_min = {}\n\
         theta_max = {}\n\
         refresh_period = {}\n\
         \n\
         [eval]\n\
         iou_thresh = {}\n\
         score_thresh = {}\n",
        d.seed,
        d.source_beams,
        d.target_beams,
        d.train_frames,
        d.eval_frames,
        m.voxel_size_xy,
        m.voxel_size_z,
        m.lidar_hidden,
        m.bev_channels_per_voxel,
        m.camera_hidden,
        m.depth_bins,
        m.depth_min,
        m.depth_max,
        m.feature_width,
        m.disc_hidden,
        p.epochs,
        p.batch_size,
        p.learning_rate,
        p.lambda_det,
        p.lambda_cmki,
        s.rounds,
        s.epochs,
        s.batch_size,
        s.learning_rate,
        s.lambda_det,
        s.lambda_d,
        s.lambda_ent,
        s.t_pos,
        s.disc_score,
        s.theta_min,
        s.theta_max,
        s.refresh_period,
        e.iou_thresh,
        e.score_thresh,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_as_fixed_point() {
        let cfg = ExperimentConfig::default();
        let text = serialize_config(&cfg);
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(serialize_config(&parsed), text);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = parse_config("[dataset]\ntrain_frames = 16\n\n[selftrain]\nrounds = 2\n").unwrap();
        assert_eq!(cfg.dataset.train_frames, 16);
        assert_eq!(cfg.selftrain.rounds, 2);
        assert_eq!(cfg.dataset.source_beams, 64);
        assert_eq!(cfg.eval.iou_thresh, 0.7);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(parse_config("[dataset]\nbogus = 1\n").is_err());
        assert!(parse_config("[warp]\nspeed = 9\n").is_err());
        assert!(parse_config("loose = 1\n").is_err());
        assert!(parse_config("[dataset]\nseed 9\n").is_err());
        assert!(parse_config("[dataset]\nseed = pony\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = parse_config("# top\n\n[eval]\n# inner\niou_thresh = 0.5\n").unwrap();
        assert_eq!(cfg.eval.iou_thresh, 0.5);
    }

    #[test]
    fn model_config_derives_consistent_shapes() {
        let cfg = ExperimentConfig::default();
        let mc = cfg.model_config().unwrap();
        let (x, y, z) = mc.grid.dims();
        assert_eq!((x, y, z), (64, 64, 4));
        assert_eq!(mc.lidar.in_channels, z * 3);
        assert_eq!(mc.lidar.out_channels, z * cfg.model.bev_channels_per_voxel);
        assert_eq!(mc.head.in_channels, mc.lidar.out_channels);
        assert_eq!(mc.camera.feature_channels * z, mc.lidar.out_channels);
    }

    #[test]
    fn model_config_rejects_degenerate_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.depth_min = 5.0;
        cfg.model.depth_max = 2.0;
        assert!(cfg.model_config().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.lidar_hidden = 0;
        assert!(cfg.model_config().is_err());
    }
}
