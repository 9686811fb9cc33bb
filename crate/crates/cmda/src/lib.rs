//! Cross-modal domain adaptation for LiDAR 3D object detection.
//!
//! The pipeline trains a BEV detector on a labeled source domain with a
//! camera-stream knowledge-interaction loss, then adapts it to an unlabeled
//! target domain by polar-sector mix-up self-training with an adversarial
//! domain discriminator. Everything runs on the CPU in f64 and is exactly
//! reproducible from a seed.

pub mod adapt;
pub mod autodiff;
pub mod camera_bev;
pub mod config;
pub mod detect;
pub mod eval;
pub mod geometry;
pub mod lidar_bev;
pub mod losses;
pub mod mixup;
pub mod nn;
pub mod scene;
