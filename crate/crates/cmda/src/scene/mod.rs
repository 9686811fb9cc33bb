//! Synthetic two-domain LiDAR scenes: ray-cast generation, camera rendering,
//! and the on-disk frame/manifest formats.

pub mod camera;
mod generate;
mod io;
mod types;

pub use camera::{render_camera, IMAGE_SIZE};
pub use generate::{generate_scene, quantize_box};
pub use io::{load_frame, read_manifest, save_frame, write_manifest, ManifestEntry};
pub use types::{
    linspace, CameraFrame, DomainKind, DomainSpec, Frame, PointCloud, SceneError, GROUND_Z,
    UNIFIED_RANGE,
};
