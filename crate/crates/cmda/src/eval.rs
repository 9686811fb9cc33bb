//! KITTI-style evaluation: greedy score-ordered matching at IoU 0.7, average
//! precision over 40 recall positions, Closed Gap arithmetic, and range /
//! point-count breakdowns.

use crate::geometry::{iou_3d, iou_bev, points_in_box, Box3d};
use crate::scene::PointCloud;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("closed gap undefined: oracle and direct-transfer AP coincide ({0})")]
    UndefinedClosedGap(f64),
}

/// Evaluation IoU threshold for both BEV and 3D matching.
pub const IOU_THRESH: f64 = 0.7;

/// Range buckets by ground-truth center distance (meters).
pub const RANGE_EDGES: [f64; 2] = [20.0, 40.0];

/// Point-count buckets by points inside the ground-truth box.
pub const POINT_EDGES: [usize; 2] = [20, 100];

/// One detection's outcome: its score, the ground truth it claimed (if any),
/// and that IoU.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub det: usize,
    pub score: f64,
    pub gt: Option<usize>,
    pub iou: f64,
}

impl MatchRecord {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

/// Greedy matching: detections in descending score order each take the
/// highest-IoU still-unmatched ground truth with IoU ≥ `thresh`.
pub fn match_detections(
    dets: &[(Box3d, f64)],
    gts: &[Box3d],
    iou_fn: impl Fn(&Box3d, &Box3d) -> f64,
    thresh: f64,
) -> Vec<MatchRecord> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut records = Vec::with_capacity(dets.len());
    for di in order {
        let (ref dbox, score) = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = iou_fn(dbox, gt);
            if iou >= thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) => {
                taken[gi] = true;
                records.push(MatchRecord { det: di, score, gt: Some(gi), iou });
            }
            None => records.push(MatchRecord { det: di, score, gt: None, iou: 0.0 }),
        }
    }
    records
}

/// AP over recall positions {1/40, …, 40/40}: at each position, the maximum
/// precision among operating points whose recall reaches it (0 if never).
/// Undefined without ground truth.
pub fn average_precision(records: &[MatchRecord], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.det.cmp(&b.det)));
    let mut curve = Vec::with_capacity(sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for r in &sorted {
        if r.is_tp() {
            tp += 1;
        } else {
            fp += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_gt as f64;
        curve.push((recall, precision));
    }
    let mut total = 0.0;
    for pos in 1..=40 {
        let level = pos as f64 / 40.0;
        let best = curve
            .iter()
            .filter(|(r, _)| *r >= level - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(total / 40.0)
}

/// (model − direct) / (oracle − direct) × 100.
pub fn closed_gap(ap_model: f64, ap_direct: f64, ap_oracle: f64) -> Result<f64, EvalError> {
    let denom = ap_oracle - ap_direct;
    if denom.abs() < 1e-12 {
        return Err(EvalError::UndefinedClosedGap(ap_oracle));
    }
    Ok((ap_model - ap_direct) / denom * 100.0)
}

/// Per-ground-truth context for breakdowns.
#[derive(Debug, Clone, Copy)]
pub struct GtContext {
    pub distance: f64,
    pub point_count: usize,
}

pub fn gt_context(gts: &[Box3d], cloud: &PointCloud) -> Vec<GtContext> {
    gts.iter()
        .map(|b| GtContext {
            distance: (b.x * b.x + b.y * b.y).sqrt(),
            point_count: points_in_box(&cloud.points, b).len(),
        })
        .collect()
}

/// Recall within one bucket; `recall` absent when the bucket holds no gt.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BucketStat {
    pub label: String,
    pub gt: usize,
    pub tp: usize,
    pub recall: Option<f64>,
}

fn bucketize(
    records: &[MatchRecord],
    contexts: &[GtContext],
    labels: &[String],
    bucket_of: impl Fn(&GtContext) -> usize,
) -> Vec<BucketStat> {
    let mut stats: Vec<BucketStat> = labels
        .iter()
        .map(|l| BucketStat { label: l.clone(), gt: 0, tp: 0, recall: None })
        .collect();
    for ctx in contexts {
        stats[bucket_of(ctx)].gt += 1;
    }
    for r in records {
        if let Some(gi) = r.gt {
            stats[bucket_of(&contexts[gi])].tp += 1;
        }
    }
    for s in &mut stats {
        if s.gt > 0 {
            s.recall = Some(s.tp as f64 / s.gt as f64);
        }
    }
    stats
}

/// Range and point-count breakdowns of the matches.
pub fn breakdown(
    records: &[MatchRecord],
    contexts: &[GtContext],
) -> (Vec<BucketStat>, Vec<BucketStat>) {
    let range_labels = vec!["0-20m".into(), "20-40m".into(), "40m+".into()];
    let point_labels = vec!["0-19pts".into(), "20-99pts".into(), "100pts+".into()];
    let by_range = bucketize(records, contexts, &range_labels, |ctx| {
        RANGE_EDGES.iter().position(|&e| ctx.distance < e).unwrap_or(RANGE_EDGES.len())
    });
    let by_points = bucketize(records, contexts, &point_labels, |ctx| {
        POINT_EDGES.iter().position(|&e| ctx.point_count < e).unwrap_or(POINT_EDGES.len())
    });
    (by_range, by_points)
}

/// Aggregated metrics over an evaluation split. AP fields are fractions in
/// [0, 1]; reports print them ×100.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub bev_ap: Option<f64>,
    pub ap_3d: Option<f64>,
    pub gt_count: usize,
    pub det_count: usize,
    pub tp_bev: usize,
    pub fp_bev: usize,
    pub tp_3d: usize,
    pub fp_3d: usize,
    pub range_buckets: Vec<BucketStat>,
    pub point_buckets: Vec<BucketStat>,
}

/// Accumulates frames and produces an [`EvalReport`]. Ground-truth indices
/// are offset per frame so bucket contexts stay aligned.
pub struct Evaluator {
    thresh: f64,
    bev: Vec<MatchRecord>,
    iou3d: Vec<MatchRecord>,
    contexts: Vec<GtContext>,
    det_count: usize,
}

impl Evaluator {
    pub fn new(thresh: f64) -> Self {
        Self { thresh, bev: Vec::new(), iou3d: Vec::new(), contexts: Vec::new(), det_count: 0 }
    }

    pub fn add_frame(&mut self, dets: &[(Box3d, f64)], gts: &[Box3d], cloud: &PointCloud) {
        let gt_base = self.contexts.len();
        let det_base = self.det_count;
        for mut r in match_detections(dets, gts, iou_bev, self.thresh) {
            r.det += det_base;
            r.gt = r.gt.map(|g| g + gt_base);
            self.bev.push(r);
        }
        for mut r in match_detections(dets, gts, iou_3d, self.thresh) {
            r.det += det_base;
            r.gt = r.gt.map(|g| g + gt_base);
            self.iou3d.push(r);
        }
        self.contexts.extend(gt_context(gts, cloud));
        self.det_count += dets.len();
    }

    pub fn report(&self) -> EvalReport {
        let n_gt = self.contexts.len();
        let tp_bev = self.bev.iter().filter(|r| r.is_tp()).count();
        let tp_3d = self.iou3d.iter().filter(|r| r.is_tp()).count();
        let (range_buckets, point_buckets) = breakdown(&self.bev, &self.contexts);
        EvalReport {
            bev_ap: average_precision(&self.bev, n_gt),
            ap_3d: average_precision(&self.iou3d, n_gt),
            gt_count: n_gt,
            det_count: self.det_count,
            tp_bev,
            fp_bev: self.det_count - tp_bev,
            tp_3d,
            fp_3d: self.det_count - tp_3d,
            range_buckets,
            point_buckets,
        }
    }
}

/// Flat CSV (metric, bucket, value) for plotting.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,bucket,value\n");
    let mut push = |metric: &str, bucket: &str, value: Option<f64>| {
        if let Some(v) = value {
            out.push_str(&format!("{metric},{bucket},{:.4}\n", v));
        }
    };
    push("bev_ap", "all", report.bev_ap.map(|v| v * 100.0));
    push("3d_ap", "all", report.ap_3d.map(|v| v * 100.0));
    for b in &report.range_buckets {
        push("recall_bev", &b.label, b.recall);
    }
    for b in &report.point_buckets {
        push("recall_bev", &b.label, b.recall);
    }
    out
}
