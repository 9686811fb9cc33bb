//! LiDAR branch: point-cloud voxelization, height compression, and the
//! BEV feature encoder.
//!
//! Voxel statistics are accumulated in 2^24 fixed point so the result is
//! bit-identical under any permutation of the input points.

use crate::autodiff::{AdResult, Tape, Tensor, Var};
use crate::nn::{linear, BoundParams, ParamSet};
use crate::scene::PointCloud;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid voxel grid: {0}")]
    Invalid(String),
}

/// Raw per-voxel channels: log-scaled count, mean intensity, mean z-offset.
pub const RAW_CHANNELS: usize = 3;

/// The count channel is `ln(1 + n) / ln(1 + COUNT_NORM)`: 1.0 at this many
/// points, compressed above it so beam density shifts the channel gently
/// rather than proportionally.
pub const COUNT_NORM: f64 = 16.0;

const FIXED_SCALE: f64 = (1u64 << 24) as f64;

/// A BEV voxel grid over `[x_min, y_min, z_min, x_max, y_max, z_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridSpec {
    range: [f64; 6],
    voxel_size: [f64; 3],
    dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(range: [f64; 6], voxel_size: [f64; 3]) -> Result<Self, GridError> {
        let mut dims = [0usize; 3];
        for axis in 0..3 {
            let (lo, hi, step) = (range[axis], range[axis + 3], voxel_size[axis]);
            if !(step > 0.0) || !step.is_finite() {
                return Err(GridError::Invalid(format!("voxel size {step} on axis {axis}")));
            }
            if !(hi > lo) {
                return Err(GridError::Invalid(format!("range [{lo}, {hi}] on axis {axis}")));
            }
            let n = ((hi - lo) / step).round();
            if n < 1.0 {
                return Err(GridError::Invalid(format!(
                    "axis {axis} spans fewer than one voxel ({} / {step})",
                    hi - lo
                )));
            }
            dims[axis] = n as usize;
        }
        Ok(Self { range, voxel_size, dims })
    }

    pub fn range(&self) -> &[f64; 6] {
        &self.range
    }

    pub fn voxel_size(&self) -> &[f64; 3] {
        &self.voxel_size
    }

    /// (X, Y, Z) cell counts.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.dims[0], self.dims[1], self.dims[2])
    }

    fn axis_cell(&self, axis: usize, coord: f64) -> Option<usize> {
        let (lo, hi, step) = (self.range[axis], self.range[axis + 3], self.voxel_size[axis]);
        let t = (coord - lo) / step + 1e-9;
        if t < 0.0 {
            return None;
        }
        let idx = t.floor() as usize;
        if idx < self.dims[axis] {
            Some(idx)
        } else if coord <= hi {
            Some(self.dims[axis] - 1)
        } else {
            None
        }
    }

    /// Cell containing a 3D point, or None outside the grid. Boundary points
    /// fall into the adjacent cell toward +axis; the far face is inclusive.
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize, usize)> {
        Some((self.axis_cell(0, x)?, self.axis_cell(1, y)?, self.axis_cell(2, z)?))
    }

    /// BEV cell for an (x, y) position, ignoring height.
    pub fn cell_of_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        Some((self.axis_cell(0, x)?, self.axis_cell(1, y)?))
    }

    /// Center of the (ix, iy) BEV cell.
    pub fn cell_center_xy(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.range[0] + (ix as f64 + 0.5) * self.voxel_size[0],
            self.range[1] + (iy as f64 + 0.5) * self.voxel_size[1],
        )
    }

    /// Center height of vertical slice iz.
    pub fn z_center(&self, iz: usize) -> f64 {
        self.range[2] + (iz as f64 + 0.5) * self.voxel_size[2]
    }
}

/// Bin a point cloud into `[X, Y, Z, 3]` voxel statistics.
///
/// Channels per voxel: log-scaled point count (see [`COUNT_NORM`]), mean
/// intensity, and mean
/// z-offset from the voxel's center height. Empty voxels are all-zero.
pub fn voxelize(cloud: &PointCloud, grid: &VoxelGridSpec) -> Tensor {
    let (nx, ny, nz) = grid.dims();
    let cells = nx * ny * nz;
    let mut count = vec![0u32; cells];
    let mut intensity_fp = vec![0i64; cells];
    let mut zoff_fp = vec![0i64; cells];

    for p in &cloud.points {
        let Some((ix, iy, iz)) = grid.cell_of(p[0] as f64, p[1] as f64, p[2] as f64) else {
            continue;
        };
        let cell = (ix * ny + iy) * nz + iz;
        count[cell] += 1;
        intensity_fp[cell] += (p[3] as f64 * FIXED_SCALE).round() as i64;
        let zoff = p[2] as f64 - grid.z_center(iz);
        zoff_fp[cell] += (zoff * FIXED_SCALE).round() as i64;
    }

    let mut out = Tensor::zeros(&[nx, ny, nz, RAW_CHANNELS]);
    let data = out.data_mut();
    for cell in 0..cells {
        if count[cell] == 0 {
            continue;
        }
        let n = count[cell] as f64;
        let base = cell * RAW_CHANNELS;
        data[base] = (1.0 + n).ln() / (1.0 + COUNT_NORM).ln();
        data[base + 1] = intensity_fp[cell] as f64 / FIXED_SCALE / n;
        data[base + 2] = zoff_fp[cell] as f64 / FIXED_SCALE / n;
    }
    out
}

/// Fold the vertical axis into channels: `[X, Y, Z, C]` → `[X, Y, Z·C]` with
/// `out[i, j, z·C + c] = vox[i, j, z, c]`. Row-major layout makes this a
/// pure reshape.
pub fn height_compress(vox: Tensor) -> AdResult<Tensor> {
    let s = vox.shape().to_vec();
    if s.len() != 4 {
        return Err(crate::autodiff::AdError::Contract {
            op: "height_compress",
            msg: format!("want [x, y, z, c], got {:?}", s),
        });
    }
    vox.reshaped(vec![s[0], s[1], s[2] * s[3]])
}

/// On-tape variant of [`height_compress`] for differentiable inputs.
pub fn height_compress_var(tape: &mut Tape, vox: Var) -> AdResult<Var> {
    let s = tape.shape(vox).to_vec();
    if s.len() != 4 {
        return Err(crate::autodiff::AdError::Contract {
            op: "height_compress",
            msg: format!("want [x, y, z, c], got {:?}", s),
        });
    }
    tape.reshape(vox, &[s[0], s[1], s[2] * s[3]])
}

/// Widths of the LiDAR BEV encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LidarEncoderConfig {
    /// Input channels per BEV cell (Z · RAW_CHANNELS after compression).
    pub in_channels: usize,
    pub hidden: usize,
    /// Output channels per BEV cell (the shared BEV feature width).
    pub out_channels: usize,
}

/// Parameters: pointwise lift, two 3×3 spatial mixes, pointwise head.
pub fn lidar_encoder_params(cfg: &LidarEncoderConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    p.add_init("lidar.w1", &[cfg.in_channels, cfg.hidden], cfg.in_channels, seed);
    p.add_zeros("lidar.b1", &[cfg.hidden]);
    p.add_init("lidar.k", &[3, 3, cfg.hidden, cfg.hidden], 9 * cfg.hidden, seed);
    p.add_zeros("lidar.kb", &[cfg.hidden]);
    p.add_init("lidar.k2", &[3, 3, cfg.hidden, cfg.hidden], 9 * cfg.hidden, seed ^ 0x9e37);
    p.add_zeros("lidar.k2b", &[cfg.hidden]);
    p.add_init("lidar.w2", &[cfg.hidden, cfg.out_channels], cfg.hidden, seed);
    p.add_zeros("lidar.b2", &[cfg.out_channels]);
    p
}

/// Encode compressed voxel statistics `[X, Y, in]` into BEV features
/// `[X, Y, out]`: linear → relu → (conv3×3 → relu) × 2 → linear.
pub fn lidar_encoder_forward(
    tape: &mut Tape,
    params: &BoundParams,
    raw_bev: Var,
    cfg: &LidarEncoderConfig,
) -> AdResult<Var> {
    let s = tape.shape(raw_bev).to_vec();
    if s.len() != 3 || s[2] != cfg.in_channels {
        return Err(crate::autodiff::AdError::Contract {
            op: "lidar_encoder",
            msg: format!("want [x, y, {}], got {:?}", cfg.in_channels, s),
        });
    }
    let (x, y) = (s[0], s[1]);
    let flat = tape.reshape(raw_bev, &[x * y, cfg.in_channels])?;
    let h = linear(tape, flat, params.var("lidar.w1"), params.var("lidar.b1"))?;
    let h = tape.relu(h)?;
    let h = tape.reshape(h, &[x, y, cfg.hidden])?;
    let h = tape.conv3x3(h, params.var("lidar.k"))?;
    let h = tape.add_bias(h, params.var("lidar.kb"))?;
    let h = tape.relu(h)?;
    let h = tape.conv3x3(h, params.var("lidar.k2"))?;
    let h = tape.add_bias(h, params.var("lidar.k2b"))?;
    let h = tape.relu(h)?;
    let h = tape.reshape(h, &[x * y, cfg.hidden])?;
    let out = linear(tape, h, params.var("lidar.w2"), params.var("lidar.b2"))?;
    tape.reshape(out, &[x, y, cfg.out_channels])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::scene::UNIFIED_RANGE;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn unified_grid() -> VoxelGridSpec {
        VoxelGridSpec::new(UNIFIED_RANGE, [0.4, 0.4, 0.75]).unwrap()
    }

    fn cloud(points: Vec<[f32; 4]>) -> PointCloud {
        PointCloud { points }
    }

    #[test]
    fn unified_grid_dims() {
        assert_eq!(unified_grid().dims(), (376, 376, 8));
    }

    #[test]
    fn origin_point_lands_in_cell_188() {
        let grid = unified_grid();
        assert_eq!(grid.cell_of(0.0, 0.0, 0.0), Some((188, 188, 2)));
        let vox = voxelize(&cloud(vec![[0.0, 0.0, 0.0, 0.5]]), &grid);
        assert_eq!(vox.at(&[188, 188, 2, 0]), 2f64.ln() / 17f64.ln());
        assert_eq!(vox.at(&[188, 188, 2, 1]), 0.5);
        // z-offset from slice center at -2 + 2.5*0.75 = -0.125.
        assert!((vox.at(&[188, 188, 2, 2]) - 0.125).abs() < 1e-6);
    }

    #[test]
    fn boundary_coordinates() {
        let grid = unified_grid();
        assert_eq!(grid.cell_of(-75.2, -75.2, -2.0), Some((0, 0, 0)));
        assert_eq!(grid.cell_of(75.2, 75.2, 4.0), Some((375, 375, 7)));
        assert_eq!(grid.cell_of(75.3, 0.0, 0.0), None);
        assert_eq!(grid.cell_of(-75.3, 0.0, 0.0), None);
        assert_eq!(grid.cell_of(0.0, 0.0, 4.1), None);
    }

    #[test]
    fn empty_cloud_is_all_zero() {
        let vox = voxelize(&cloud(vec![]), &unified_grid());
        assert_eq!(vox.shape(), &[376, 376, 8, 3]);
        assert!(vox.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(VoxelGridSpec::new([0.0; 6], [0.4; 3]).is_err());
        assert!(VoxelGridSpec::new(UNIFIED_RANGE, [0.0, 0.4, 0.75]).is_err());
        assert!(VoxelGridSpec::new([0.0, 0.0, 0.0, 1.0, 1.0, 0.1], [0.4, 0.4, 0.75]).is_err());
    }

    #[test]
    fn matches_per_point_binning_oracle() {
        let grid = VoxelGridSpec::new([-8.0, -8.0, -2.0, 8.0, 8.0, 4.0], [0.5, 0.5, 1.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let points: Vec<[f32; 4]> = (0..1000)
            .map(|_| {
                [
                    rng.gen_range(-8.0..8.0f32),
                    rng.gen_range(-8.0..8.0f32),
                    rng.gen_range(-2.0..4.0f32),
                    rng.gen_range(0.0..1.0f32),
                ]
            })
            .collect();

        let mut bins: HashMap<(usize, usize, usize), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            let ix = (((p[0] as f64 + 8.0) / 0.5).floor() as usize).min(31);
            let iy = (((p[1] as f64 + 8.0) / 0.5).floor() as usize).min(31);
            let iz = (((p[2] as f64 + 2.0) / 1.5).floor() as usize).min(3);
            bins.entry((ix, iy, iz)).or_default().push(i);
        }

        let vox = voxelize(&cloud(points.clone()), &grid);
        let mut total = 0.0;
        for ix in 0..32 {
            for iy in 0..32 {
                for iz in 0..4 {
                    let members = bins.get(&(ix, iy, iz)).map(Vec::as_slice).unwrap_or(&[]);
                    let n = members.len() as f64;
                    total += ((vox.at(&[ix, iy, iz, 0]) * 17f64.ln()).exp() - 1.0).round();
                    assert_eq!(
                        vox.at(&[ix, iy, iz, 0]),
                        (1.0 + n).ln() / 17f64.ln(),
                        "count at {ix},{iy},{iz}"
                    );
                    if members.is_empty() {
                        continue;
                    }
                    let mean_i: f64 =
                        members.iter().map(|&i| points[i][3] as f64).sum::<f64>() / n;
                    let zc = -2.0 + (iz as f64 + 0.5) * 1.5;
                    let mean_z: f64 =
                        members.iter().map(|&i| points[i][2] as f64 - zc).sum::<f64>() / n;
                    assert!((vox.at(&[ix, iy, iz, 1]) - mean_i).abs() < 1e-6);
                    assert!((vox.at(&[ix, iy, iz, 2]) - mean_z).abs() < 1e-6);
                }
            }
        }
        assert_eq!(total, 1000.0);
    }

    #[test]
    fn permutation_invariant_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points: Vec<[f32; 4]> = (0..600)
            .map(|_| {
                [
                    rng.gen_range(-70.0..70.0f32),
                    rng.gen_range(-70.0..70.0f32),
                    rng.gen_range(-1.9..3.9f32),
                    rng.gen_range(0.0..1.0f32),
                ]
            })
            .collect();
        let mut shuffled = points.clone();
        shuffled.shuffle(&mut rng);
        assert_ne!(points, shuffled);
        let grid = unified_grid();
        let a = voxelize(&cloud(points), &grid);
        let b = voxelize(&cloud(shuffled), &grid);
        assert_eq!(a, b);
    }

    #[test]
    fn translation_by_one_pitch_shifts_occupancy() {
        let grid = VoxelGridSpec::new([-4.0, -4.0, -1.0, 4.0, 4.0, 1.0], [0.5, 0.5, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let points: Vec<[f32; 4]> = (0..200)
            .map(|_| {
                [
                    rng.gen_range(-3.0..2.0f32),
                    rng.gen_range(-3.0..3.0f32),
                    rng.gen_range(-0.9..0.9f32),
                    0.5,
                ]
            })
            .collect();
        let moved: Vec<[f32; 4]> = points.iter().map(|p| [p[0] + 0.5, p[1], p[2], p[3]]).collect();
        let a = voxelize(&cloud(points), &grid);
        let b = voxelize(&cloud(moved), &grid);
        let (nx, ny, nz) = grid.dims();
        for ix in 0..nx - 1 {
            for iy in 0..ny {
                for iz in 0..nz {
                    for c in 0..RAW_CHANNELS {
                        let lhs = a.at(&[ix, iy, iz, c]);
                        let rhs = b.at(&[ix + 1, iy, iz, c]);
                        assert!(
                            (lhs - rhs).abs() < 1e-9,
                            "channel {c} mismatch at {ix},{iy},{iz}: {lhs} vs {rhs}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn height_compress_layout() {
        // Z=1 is an identity on the data.
        let v = Tensor::new(vec![2, 2, 1, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let flat = height_compress(v.clone()).unwrap();
        assert_eq!(flat.shape(), &[2, 2, 3]);
        assert_eq!(flat.data(), v.data());

        // Known 2x2x2x1 layout: out[i, j, z] = vox[i, j, z, 0].
        let v = Tensor::new(vec![2, 2, 2, 1], (0..8).map(|i| i as f64).collect()).unwrap();
        let flat = height_compress(v).unwrap();
        assert_eq!(flat.at(&[0, 0, 0]), 0.0);
        assert_eq!(flat.at(&[0, 0, 1]), 1.0);
        assert_eq!(flat.at(&[1, 0, 0]), 4.0);
        assert_eq!(flat.at(&[1, 1, 1]), 7.0);

        // Mixed Z and C: out[i, j, z*C + c].
        let v = Tensor::new(vec![1, 2, 3, 2], (0..12).map(|i| i as f64).collect()).unwrap();
        let flat = height_compress(v.clone()).unwrap();
        assert_eq!(flat.shape(), &[1, 2, 6]);
        let sum_before: f64 = v.data().iter().sum();
        let sum_after: f64 = flat.data().iter().sum();
        assert_eq!(sum_before, sum_after);
        assert_eq!(flat.at(&[0, 1, 2 * 2 + 1]), v.at(&[0, 1, 2, 1]));

        assert!(height_compress(Tensor::zeros(&[2, 2, 3])).is_err());
    }

    fn small_cfg() -> LidarEncoderConfig {
        LidarEncoderConfig { in_channels: 6, hidden: 4, out_channels: 4 }
    }

    #[test]
    fn encoder_zero_input_zero_bias_gives_zero() {
        let cfg = small_cfg();
        let params = lidar_encoder_params(&cfg, 3);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let raw = tape.constant(Tensor::zeros(&[5, 5, 6]));
        let out = lidar_encoder_forward(&mut tape, &bound, raw, &cfg).unwrap();
        assert_eq!(tape.shape(out), &[5, 5, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_deterministic() {
        let cfg = small_cfg();
        let params = lidar_encoder_params(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Tensor::new(
            vec![4, 4, 6],
            (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let run = |raw: &Tensor| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let v = tape.constant(raw.clone());
            let out = lidar_encoder_forward(&mut tape, &bound, v, &cfg).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(&raw), run(&raw));
    }

    #[test]
    fn encoder_rejects_wrong_channel_count() {
        let cfg = small_cfg();
        let params = lidar_encoder_params(&cfg, 3);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let raw = tape.constant(Tensor::zeros(&[4, 4, 5]));
        assert!(lidar_encoder_forward(&mut tape, &bound, raw, &cfg).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let params = lidar_encoder_params(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let raw = Tensor::new(
            vec![4, 4, 6],
            (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let report = check_gradients(
            |tape, vars| {
                let bound = BoundParams::from_parts(names.clone(), vars.to_vec());
                let raw_v = tape.constant(raw.clone());
                let out = lidar_encoder_forward(tape, &bound, raw_v, &cfg)?;
                tape.mean(out)
            },
            &tensors,
            2e-5,
        )
        .unwrap();
        assert!(report.within(1e-3), "max rel err {}", report.max_rel_err);
    }
}
