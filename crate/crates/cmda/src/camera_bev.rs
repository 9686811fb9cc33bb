//! Camera branch: per-pixel image encoder with a categorical depth head,
//! outer-product lift to frustum features, and a splat onto the shared BEV
//! voxel grid.
//!
//! Depth bins sit at fixed metric positions, so geometry contributes no
//! gradient; learning flows through the depth probabilities and features.

use crate::autodiff::{AdError, AdResult, Tape, Tensor, Var};
use crate::lidar_bev::{height_compress_var, VoxelGridSpec};
use crate::nn::{linear, BoundParams, ParamSet};
use crate::scene::camera::{camera_to_world, unproject};
use crate::scene::CameraFrame;

fn contract(op: &'static str, msg: String) -> AdError {
    AdError::Contract { op, msg }
}

/// Monotone depth-bin edges in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins {
    edges: Vec<f64>,
}

impl DepthBins {
    pub fn new(edges: Vec<f64>) -> AdResult<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(contract("depth_bins", format!("edges not monotone: {:?}", edges)));
        }
        Ok(Self { edges })
    }

    /// `count` uniform bins spanning [lo, hi].
    pub fn uniform(lo: f64, hi: f64, count: usize) -> AdResult<Self> {
        if count == 0 {
            return Err(contract("depth_bins", "zero bins".into()));
        }
        let step = (hi - lo) / count as f64;
        Self::new((0..=count).map(|i| lo + i as f64 * step).collect())
    }

    pub fn count(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn center(&self, d: usize) -> f64 {
        0.5 * (self.edges[d] + self.edges[d + 1])
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }
}

/// Per-pixel categorical depth estimate, on-tape.
pub struct DepthDistribution {
    /// `[H, W, D]`, softmax-normalized over the last axis.
    pub probs: Var,
    pub bins: DepthBins,
}

/// Widths of the camera branch.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraBevConfig {
    pub hidden: usize,
    /// Per-voxel feature width C; the BEV output has Z·C channels.
    pub feature_channels: usize,
    pub depth_bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl CameraBevConfig {
    pub fn bins(&self) -> AdResult<DepthBins> {
        DepthBins::uniform(self.depth_min, self.depth_max, self.depth_bins)
    }
}

impl Default for CameraBevConfig {
    fn default() -> Self {
        Self { hidden: 8, feature_channels: 4, depth_bins: 16, depth_min: 1.0, depth_max: 60.0 }
    }
}

/// Trunk conv, feature head, depth head, and the post-splat per-voxel refine.
pub fn camera_bev_params(cfg: &CameraBevConfig, seed: u64) -> ParamSet {
    let c = cfg.feature_channels;
    let mut p = ParamSet::new();
    p.add_init("cam.k1", &[3, 3, 3, cfg.hidden], 9 * 3, seed);
    p.add_zeros("cam.kb1", &[cfg.hidden]);
    p.add_init("cam.wf", &[cfg.hidden, c], cfg.hidden, seed);
    p.add_zeros("cam.bf", &[c]);
    p.add_init("cam.wd", &[cfg.hidden, cfg.depth_bins], cfg.hidden, seed);
    p.add_zeros("cam.bd", &[cfg.depth_bins]);
    p.add_init("cam.wr", &[c, c], c, seed);
    p.add_zeros("cam.br", &[c]);
    p
}

/// Image `[H, W, 3]` → per-pixel features `[H, W, C]` and a softmax depth
/// distribution `[H, W, D]`.
pub fn image_encoder_forward(
    tape: &mut Tape,
    params: &BoundParams,
    image: Var,
    cfg: &CameraBevConfig,
) -> AdResult<(Var, DepthDistribution)> {
    let s = tape.shape(image).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(contract("image_encoder", format!("want [h, w, 3], got {:?}", s)));
    }
    let (h, w) = (s[0], s[1]);
    let t = tape.conv3x3(image, params.var("cam.k1"))?;
    let t = tape.add_bias(t, params.var("cam.kb1"))?;
    let t = tape.relu(t)?;
    let flat = tape.reshape(t, &[h * w, cfg.hidden])?;
    let feats = linear(tape, flat, params.var("cam.wf"), params.var("cam.bf"))?;
    let feats = tape.reshape(feats, &[h, w, cfg.feature_channels])?;
    let logits = linear(tape, flat, params.var("cam.wd"), params.var("cam.bd"))?;
    let probs = tape.softmax_last(logits)?;
    let probs = tape.reshape(probs, &[h, w, cfg.depth_bins])?;
    Ok((feats, DepthDistribution { probs, bins: cfg.bins()? }))
}

/// Outer product: `out[h,w,d,c] = depth.probs[h,w,d] · feats[h,w,c]`.
pub fn lift(tape: &mut Tape, feats: Var, depth: &DepthDistribution) -> AdResult<Var> {
    let sf = tape.shape(feats).to_vec();
    let sp = tape.shape(depth.probs).to_vec();
    if sf.len() != 3 || sp.len() != 3 || sf[0] != sp[0] || sf[1] != sp[1] {
        return Err(contract("lift", format!("features {:?} vs depth {:?}", sf, sp)));
    }
    let (h, w) = (sf[0], sf[1]);
    let (c, d) = (sf[2], sp[2]);
    let p2 = tape.reshape(depth.probs, &[h * w, d])?;
    let f2 = tape.reshape(feats, &[h * w, c])?;
    let frustum = tape.outer_last(p2, f2)?;
    tape.reshape(frustum, &[h, w, d, c])
}

fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Destination voxel row for every frustum cell, in `pix·D + d` order;
/// `usize::MAX` marks cells that unproject outside the grid.
pub fn frustum_voxel_map(
    intrinsics: &[f64; 9],
    extrinsics: &[f64; 16],
    height: usize,
    width: usize,
    bins: &DepthBins,
    grid: &VoxelGridSpec,
) -> AdResult<Vec<usize>> {
    if det3(intrinsics).abs() < 1e-9 {
        return Err(contract("splat", "singular intrinsics".into()));
    }
    let (_, ny, nz) = grid.dims();
    let mut map = Vec::with_capacity(height * width * bins.count());
    for i in 0..height {
        for j in 0..width {
            let (u, v) = (j as f64 + 0.5, i as f64 + 0.5);
            for d in 0..bins.count() {
                let cam = unproject(intrinsics, u, v, bins.center(d));
                let world = camera_to_world(extrinsics, cam);
                map.push(match grid.cell_of(world[0], world[1], world[2]) {
                    Some((ix, iy, iz)) => (ix * ny + iy) * nz + iz,
                    None => usize::MAX,
                });
            }
        }
    }
    Ok(map)
}

/// Mean-pool frustum features `[H, W, D, C]` into voxels `[X, Y, Z, C]`
/// following a [`frustum_voxel_map`]. Voxels nobody hits stay zero.
pub fn splat(
    tape: &mut Tape,
    frustum: Var,
    map: &[usize],
    grid: &VoxelGridSpec,
) -> AdResult<Var> {
    let s = tape.shape(frustum).to_vec();
    if s.len() != 4 {
        return Err(contract("splat", format!("want [h, w, d, c], got {:?}", s)));
    }
    let rows = s[0] * s[1] * s[2];
    if map.len() != rows {
        return Err(contract("splat", format!("map covers {} of {rows} cells", map.len())));
    }
    let (nx, ny, nz) = grid.dims();
    let flat = tape.reshape(frustum, &[rows, s[3]])?;
    let pooled = tape.scatter_mean(flat, map, nx * ny * nz)?;
    tape.reshape(pooled, &[nx, ny, nz, s[3]])
}

/// Per-voxel linear refine, then fold height into channels → `[X, Y, Z·C]`.
pub fn refine_and_compress(tape: &mut Tape, vox: Var, params: &BoundParams) -> AdResult<Var> {
    let s = tape.shape(vox).to_vec();
    if s.len() != 4 {
        return Err(contract("voxel_refine", format!("want [x, y, z, c], got {:?}", s)));
    }
    let rows = s[0] * s[1] * s[2];
    let flat = tape.reshape(vox, &[rows, s[3]])?;
    let refined = linear(tape, flat, params.var("cam.wr"), params.var("cam.br"))?;
    let vox = tape.reshape(refined, &[s[0], s[1], s[2], s[3]])?;
    height_compress_var(tape, vox)
}

/// Full camera branch: image → encoder → lift → splat → refine → compress.
/// Output `[X, Y, Z·C]` matches the LiDAR encoder's BEV shape.
pub fn camera_bev_forward(
    tape: &mut Tape,
    params: &BoundParams,
    image: Var,
    intrinsics: &[f64; 9],
    extrinsics: &[f64; 16],
    cfg: &CameraBevConfig,
    grid: &VoxelGridSpec,
) -> AdResult<Var> {
    let (feats, depth) = image_encoder_forward(tape, params, image, cfg)?;
    let s = tape.shape(image).to_vec();
    let map = frustum_voxel_map(intrinsics, extrinsics, s[0], s[1], &depth.bins, grid)?;
    let frustum = lift(tape, feats, &depth)?;
    let vox = splat(tape, frustum, &map, grid)?;
    refine_and_compress(tape, vox, params)
}

/// Camera pixels as an f64 image tensor `[H, W, 3]`.
pub fn image_tensor(frame: &CameraFrame) -> Tensor {
    let data = frame.features.iter().map(|&v| v as f64).collect();
    Tensor::new(vec![frame.height, frame.width, 3], data).expect("camera frame well-formed")
}
