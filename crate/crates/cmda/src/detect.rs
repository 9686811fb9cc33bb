//! Anchor-free BEV detection head over encoder features: per-cell objectness
//! and box regression, decoding, greedy NMS, region labeling for mixed
//! frames, and confidence-thresholded pseudo-labels.

use crate::autodiff::{AdError, AdResult, Tape, Tensor, Var};
use crate::geometry::{iou_bev, Box3d};
use crate::lidar_bev::VoxelGridSpec;
use crate::mixup::SectorMask;
use crate::nn::{linear, BoundParams, ParamSet};
use crate::scene::DomainKind;

fn contract(op: &'static str, msg: String) -> AdError {
    AdError::Contract { op, msg }
}

/// Height that a zero Δz residual decodes to (typical object center).
pub const Z_REF: f64 = -1.05;

/// Default NMS BEV-IoU suppression threshold.
pub const NMS_IOU: f64 = 0.1;

/// Default pseudo-label confidence threshold.
pub const T_POS: f64 = 0.6;

/// Initial objectness bias, the logit of a ~2% positive-cell rate.
pub const OBJ_PRIOR_LOGIT: f64 = -4.0;

/// Fixed gain on the objectness logit. The gained head spans the same
/// function class as a plain linear layer, but the mean-reduced objectness
/// BCE dilutes each positive cell's gradient by the cell count, and the gain
/// restores a workable step size for the objectness weights without touching
/// the shared trunk's scale.
pub const OBJ_GAIN: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    /// Encoder BEV channel count (Z·C).
    pub in_channels: usize,
    /// Instance feature width C_f.
    pub feature_width: usize,
}

impl HeadConfig {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, feature_width: 32 }
    }
}

/// Shared trunk plus objectness and box heads.
pub fn head_params(cfg: &HeadConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    p.add_init("head.wt", &[cfg.in_channels, cfg.feature_width], cfg.in_channels, seed);
    p.add_zeros("head.bt", &[cfg.feature_width]);
    p.add_init("head.wo", &[cfg.feature_width, 1], cfg.feature_width, seed);
    // Objectness starts near the positive-cell base rate; a zero init makes
    // the mean BCE spend thousands of steps just sinking the bias, swamping
    // the per-cell signal on the way down.
    p.add_tensor("head.bo", Tensor::full(&[1], OBJ_PRIOR_LOGIT));
    p.add_init("head.wb", &[cfg.feature_width, 8], cfg.feature_width, seed);
    // Box biases start at the residual targets of an average upright car
    // (log-dims of a 4.3 × 1.89 × 1.5 box, everything else centered), so the
    // first steps regress deviations instead of absolute scales.
    let prior = [0.0, 0.0, 0.0, 4.3f64.ln(), 1.89f64.ln(), 1.5f64.ln(), 0.0, 0.0];
    p.add_tensor("head.bb", Tensor::new(vec![8], prior.to_vec()).expect("static shape"));
    p
}

/// On-tape head outputs. `objectness` is the sigmoid of `obj_logits`; the
/// logits feed the detection loss, the probabilities feed decoding.
pub struct HeadOutput {
    pub obj_logits: Var,
    pub objectness: Var,
    pub box_params: Var,
    pub cell_features: Var,
}

/// Per-cell two-layer head: trunk linear+relu → instance features `[X,Y,C_f]`,
/// then linear objectness `[X,Y]` and box residuals `[X,Y,8]`.
pub fn head_forward(
    tape: &mut Tape,
    params: &BoundParams,
    f_bev: Var,
    cfg: &HeadConfig,
) -> AdResult<HeadOutput> {
    let s = tape.shape(f_bev).to_vec();
    if s.len() != 3 || s[2] != cfg.in_channels {
        return Err(contract("head_forward", format!("want [x, y, {}], got {:?}", cfg.in_channels, s)));
    }
    let (x, y) = (s[0], s[1]);
    let flat = tape.reshape(f_bev, &[x * y, cfg.in_channels])?;
    let trunk = linear(tape, flat, params.var("head.wt"), params.var("head.bt"))?;
    let feats = tape.relu(trunk)?;
    let scores = tape.matmul(feats, params.var("head.wo"))?;
    let gained = tape.scale(scores, OBJ_GAIN)?;
    let obj = tape.add_bias(gained, params.var("head.bo"))?;
    let obj_logits = tape.reshape(obj, &[x, y])?;
    let objectness = tape.sigmoid(obj_logits)?;
    let boxes = linear(tape, feats, params.var("head.wb"), params.var("head.bb"))?;
    let box_params = tape.reshape(boxes, &[x, y, 8])?;
    let cell_features = tape.reshape(feats, &[x, y, cfg.feature_width])?;
    Ok(HeadOutput { obj_logits, objectness, box_params, cell_features })
}

/// Box → 8 regression residuals relative to a BEV cell:
/// (Δx/dx, Δy/dy, Δz, log l, log w, log h, sin yaw, cos yaw).
pub fn encode_box(b: &Box3d, ix: usize, iy: usize, grid: &VoxelGridSpec) -> [f64; 8] {
    let (cx, cy) = grid.cell_center_xy(ix, iy);
    let (dx, dy) = (grid.voxel_size()[0], grid.voxel_size()[1]);
    [
        (b.x - cx) / dx,
        (b.y - cy) / dy,
        b.z - Z_REF,
        b.l.ln(),
        b.w.ln(),
        b.h.ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Inverse of [`encode_box`] at the same cell. Degenerate residuals (sizes
/// overflowing to non-finite) yield None.
pub fn decode_cell(residuals: &[f64], ix: usize, iy: usize, grid: &VoxelGridSpec) -> Option<Box3d> {
    let (cx, cy) = grid.cell_center_xy(ix, iy);
    let (dx, dy) = (grid.voxel_size()[0], grid.voxel_size()[1]);
    Box3d::new(
        cx + residuals[0] * dx,
        cy + residuals[1] * dy,
        Z_REF + residuals[2],
        residuals[3].exp(),
        residuals[4].exp(),
        residuals[5].exp(),
        residuals[6].atan2(residuals[7]),
        0,
    )
    .ok()
}

/// One decoded proposal. `cell` is the flat BEV index it came from (used for
/// deterministic tie-breaks and for gathering its on-tape instance feature).
#[derive(Debug, Clone)]
pub struct Detection {
    pub box3d: Box3d,
    pub score: f64,
    pub cell: usize,
    pub feature: Vec<f64>,
    pub region: Option<DomainKind>,
}

/// Decode every cell whose objectness reaches `score_thresh`.
pub fn decode(
    tape: &Tape,
    out: &HeadOutput,
    grid: &VoxelGridSpec,
    score_thresh: f64,
) -> Vec<Detection> {
    let obj = tape.value(out.objectness);
    let boxes = tape.value(out.box_params);
    let feats = tape.value(out.cell_features);
    let [x, y] = [obj.shape()[0], obj.shape()[1]];
    let cf = feats.shape()[2];
    let mut dets = Vec::new();
    for ix in 0..x {
        for iy in 0..y {
            let cell = ix * y + iy;
            let score = obj.data()[cell];
            if score < score_thresh {
                continue;
            }
            let residuals = &boxes.data()[cell * 8..(cell + 1) * 8];
            let Some(box3d) = decode_cell(residuals, ix, iy, grid) else {
                continue;
            };
            dets.push(Detection {
                box3d,
                score,
                cell,
                feature: feats.data()[cell * cf..(cell + 1) * cf].to_vec(),
                region: None,
            });
        }
    }
    dets
}

/// Greedy NMS: descending score (ties → lower cell index), suppressing any
/// detection whose BEV IoU with a kept one reaches `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| iou_bev(&k.box3d, &d.box3d) < iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Label each detection's region by whether its center azimuth falls in the
/// mixed frame's source sector `[start, start+θ)`.
pub fn assign_region(dets: &mut [Detection], start: f64, theta: f64) {
    let mask = SectorMask::new(start, theta);
    for d in dets {
        d.region = Some(if mask.contains(d.box3d.center_azimuth()) {
            DomainKind::Source
        } else {
            DomainKind::Target
        });
    }
}

/// Confidence-thresholded pseudo-labels for one frame.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub boxes: Vec<(Box3d, f64)>,
    pub threshold: f64,
}

pub fn make_pseudo_labels(dets: &[Detection], t_pos: f64) -> PseudoLabelSet {
    let boxes = dets
        .iter()
        .filter(|d| d.score >= t_pos)
        .map(|d| (d.box3d.clone(), d.score))
        .collect();
    PseudoLabelSet { boxes, threshold: t_pos }
}

/// Per-cell training targets: a cell is positive iff a label's center falls
/// in it (first label wins when two share a cell).
pub struct CellTargets {
    /// `[X, Y]` of 0/1 objectness.
    pub objectness: Tensor,
    /// Flat indices of positive cells, ascending.
    pub positives: Vec<usize>,
    /// `[P, 8]` residuals aligned with `positives`.
    pub residuals: Tensor,
}

pub fn assign_targets(labels: &[Box3d], grid: &VoxelGridSpec) -> CellTargets {
    let (x, y, _) = grid.dims();
    let mut objectness = Tensor::zeros(&[x, y]);
    let mut assigned: Vec<(usize, [f64; 8])> = Vec::new();
    for b in labels {
        let Some((ix, iy)) = grid.cell_of_xy(b.x, b.y) else {
            continue;
        };
        let cell = ix * y + iy;
        if assigned.iter().any(|(c, _)| *c == cell) {
            continue;
        }
        objectness.data_mut()[cell] = 1.0;
        assigned.push((cell, encode_box(b, ix, iy, grid)));
    }
    assigned.sort_by_key(|(c, _)| *c);
    let positives: Vec<usize> = assigned.iter().map(|(c, _)| *c).collect();
    let mut residuals = Tensor::zeros(&[assigned.len(), 8]);
    for (row, (_, r)) in assigned.iter().enumerate() {
        residuals.data_mut()[row * 8..(row + 1) * 8].copy_from_slice(r);
    }
    CellTargets { objectness, positives, residuals }
}

/// One line per detection: frame id, 7 box floats, score (tab-separated).
pub fn detection_line(frame_id: &str, d: &Detection) -> String {
    let b = &d.box3d;
    format!(
        "{frame_id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, d.score
    )
}

pub fn parse_detection_line(line: &str) -> Option<(String, Box3d, f64)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 9 {
        return None;
    }
    let mut v = [0.0f64; 8];
    for (slot, raw) in v.iter_mut().zip(&fields[1..]) {
        *slot = raw.parse().ok()?;
    }
    let b = Box3d::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], 0).ok()?;
    Some((fields[0].to_string(), b, v[7]))
}
