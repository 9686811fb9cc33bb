//! Two-stage training orchestration: cross-modal pre-training on the source
//! domain, then LiDAR-only self-training on sector-mixed frames with an
//! adversarial domain discriminator behind the gradient-reversal layer.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AdError, AdResult, Tape, Tensor, Var};
use crate::camera_bev::{camera_bev_forward, camera_bev_params, image_tensor};
use crate::config::{
    ConfigError, EvalSection, ExperimentConfig, ModelConfig, PretrainSection, SelftrainSection,
};
use crate::detect::{
    assign_region, assign_targets, decode, head_forward, head_params, make_pseudo_labels, nms,
    Detection, HeadOutput, NMS_IOU, T_POS,
};
use crate::eval::{EvalReport, Evaluator};
use crate::lidar_bev::{height_compress, lidar_encoder_forward, lidar_encoder_params, voxelize};
use crate::losses::{
    cmki_loss, det_loss, domain_loss, entropy_loss, total_loss, LossParts, LossWeights,
};
use crate::mixup::polar_mix;
use crate::nn::{fnv1a64, linear, BoundParams, ParamSet};
use crate::scene::{read_manifest, load_frame, DomainKind, Frame, PointCloud, SceneError};

/// Objectness floor for inference-time decoding: detections feeding NMS,
/// pseudo-labels, and the discriminator all start from this threshold.
pub const INFER_SCORE: f64 = 0.3;

/// SGD momentum coefficient for both stages.
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Math(#[from] AdError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type AdaptResult<T> = Result<T, AdaptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Selftrain,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Selftrain => "selftrain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(Stage::Pretrain),
            "selftrain" => Some(Stage::Selftrain),
            _ => None,
        }
    }
}

/// Per-stage training hyper-parameters. Constructors force the loss toggles
/// for their stage; `validate` re-checks the coupling.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Adversarial branch switch; ablations turn it off wholesale.
    pub cdan: bool,
    /// Score floor for detections fed to the discriminator.
    pub disc_score: f64,
    /// Score floor for pseudo-labels kept at refresh time.
    pub t_pos: f64,
    pub theta_range: (f64, f64),
    /// Refresh pseudo-labels at the start of every n-th self-training round.
    pub refresh_period: usize,
}

impl TrainConfig {
    pub fn pretrain(sec: &PretrainSection, seed: u64) -> Self {
        let mut weights = LossWeights::pretrain();
        weights.lambda_det = sec.lambda_det;
        weights.lambda_cmki = sec.lambda_cmki;
        Self {
            stage: Stage::Pretrain,
            epochs: sec.epochs,
            batch_size: sec.batch_size.max(1),
            learning_rate: sec.learning_rate,
            seed,
            weights,
            cdan: false,
            disc_score: INFER_SCORE,
            t_pos: T_POS,
            theta_range: (std::f64::consts::FRAC_PI_2, 3.0 * std::f64::consts::FRAC_PI_2),
            refresh_period: 1,
        }
    }

    pub fn selftrain(sec: &SelftrainSection, seed: u64) -> Self {
        let mut weights = LossWeights::selftrain();
        weights.lambda_det = sec.lambda_det;
        weights.lambda_d = sec.lambda_d;
        weights.lambda_ent = sec.lambda_ent;
        Self {
            stage: Stage::Selftrain,
            epochs: sec.epochs.max(1),
            batch_size: sec.batch_size.max(1),
            learning_rate: sec.learning_rate,
            seed,
            weights,
            cdan: true,
            disc_score: sec.disc_score,
            t_pos: sec.t_pos,
            theta_range: (sec.theta_min, sec.theta_max),
            refresh_period: sec.refresh_period.max(1),
        }
    }

    pub fn validate(&self) -> AdResult<()> {
        self.weights.validate()?;
        let want = match self.stage {
            Stage::Pretrain => (true, false),
            Stage::Selftrain => (false, true),
        };
        if (self.weights.t_cmki, self.weights.t_cdan) != want {
            return Err(AdError::Contract {
                op: "train_config",
                msg: format!(
                    "stage {} requires toggles {:?}, got ({}, {})",
                    self.stage.as_str(),
                    want,
                    self.weights.t_cmki,
                    self.weights.t_cdan
                ),
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(AdError::Contract {
                op: "train_config",
                msg: format!("learning rate must be positive, got {}", self.learning_rate),
            });
        }
        if !(self.theta_range.0 <= self.theta_range.1) {
            return Err(AdError::Contract {
                op: "train_config",
                msg: format!("theta range {:?} is inverted", self.theta_range),
            });
        }
        Ok(())
    }
}

pub fn disc_params(feature_width: usize, hidden: usize, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    p.add_init("disc.w1", &[feature_width, hidden], feature_width, seed);
    p.add_zeros("disc.b1", &[hidden]);
    p.add_init("disc.w2", &[hidden, 2], hidden, seed);
    p.add_zeros("disc.b2", &[2]);
    p
}

/// Two-layer domain classifier over instance features `[N, C_f]` → `[N, 2]`.
/// Callers route the input through `grad_reverse` first; the reversal sits
/// upstream, so these weights still descend their own loss.
pub fn disc_forward(tape: &mut Tape, params: &BoundParams, feats: Var) -> AdResult<Var> {
    let h = linear(tape, feats, params.var("disc.w1"), params.var("disc.b1"))?;
    let h = tape.relu(h)?;
    linear(tape, h, params.var("disc.w2"), params.var("disc.b2"))
}

/// All learnable tensors plus the shapes they were built for. Every named
/// tensor draws from its own seed stream, so adding or removing a block never
/// shifts another block's initial values.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = lidar_encoder_params(&config.lidar, seed);
        params.extend(camera_bev_params(&config.camera, seed));
        params.extend(head_params(&config.head, seed));
        params.extend(disc_params(config.head.feature_width, config.disc_hidden, seed));
        Self { config, params }
    }

    /// BEV grid cell counts (X, Y).
    fn bev_dims(&self) -> (usize, usize) {
        let (x, y, _) = self.config.grid.dims();
        (x, y)
    }
}

/// Bind the tensors whose names start with any prefix, in storage order.
fn bind_prefixes(params: &ParamSet, tape: &mut Tape, prefixes: &[&str]) -> BoundParams {
    let mut names = Vec::new();
    let mut vars = Vec::new();
    for (name, tensor) in params.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            names.push(name.to_string());
            vars.push(tape.param(tensor.clone()));
        }
    }
    BoundParams::from_parts(names, vars)
}

/// Gradient sums over a batch of per-frame tapes, keyed by parameter name.
#[derive(Default)]
struct GradAccum {
    sums: BTreeMap<String, Vec<f64>>,
    frames: usize,
}

impl GradAccum {
    fn absorb(&mut self, tape: &Tape, bound: &BoundParams) {
        for (name, var) in bound.iter() {
            if let Some(g) = tape.grad(var) {
                let slot = self
                    .sums
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (s, gi) in slot.iter_mut().zip(g) {
                    *s += gi;
                }
            }
        }
    }
}

/// Plain SGD with momentum. Parameters that received no gradient this step
/// are left untouched, velocity included.
pub struct Sgd {
    momentum: f64,
    velocities: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocities: BTreeMap::new() }
    }

    fn apply(&mut self, params: &mut ParamSet, acc: &GradAccum, lr: f64) {
        let n = acc.frames.max(1) as f64;
        for (name, sum) in &acc.sums {
            let v = self
                .velocities
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; sum.len()]);
            let p = params.get_mut(name).data_mut();
            for i in 0..sum.len() {
                v[i] = self.momentum * v[i] + sum[i] / n;
                p[i] -= lr * v[i];
            }
        }
    }

    pub fn velocities(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.velocities.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn set_velocity(&mut self, name: &str, v: Vec<f64>) {
        self.velocities.insert(name.to_string(), v);
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}

/// Per-frame pseudo-label store, keyed by frame id.
pub type PseudoStore = BTreeMap<String, Vec<crate::geometry::Box3d>>;

/// Everything a training run carries between steps. `epoch` counts completed
/// epochs in the current stage; `round` counts completed self-training rounds.
pub struct TrainState {
    pub model: Model,
    pub opt: Sgd,
    pub stage: Stage,
    pub epoch: usize,
    pub round: usize,
    pub rng: ChaCha8Rng,
    pub pseudo: PseudoStore,
}

impl TrainState {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        Self {
            model: Model::new(config, seed),
            opt: Sgd::new(MOMENTUM),
            stage: Stage::Pretrain,
            epoch: 0,
            round: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(b"train.rng")),
            pseudo: PseudoStore::new(),
        }
    }
}

/// Scalar loss parts and discriminator tallies for one optimizer step.
#[derive(Debug, Clone, Default)]
pub struct StepStats {
    pub total: f64,
    pub det: f64,
    pub cmki: Option<f64>,
    pub domain: Option<f64>,
    pub entropy: Option<f64>,
    pub disc_correct: usize,
    pub disc_count: usize,
}

impl StepStats {
    pub fn disc_accuracy(&self) -> Option<f64> {
        (self.disc_count > 0).then(|| self.disc_correct as f64 / self.disc_count as f64)
    }
}

fn raw_bev_tensor(cloud: &PointCloud, model: &Model) -> AdResult<Tensor> {
    height_compress(voxelize(cloud, &model.config.grid))
}

fn mean_opt(parts: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = parts.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// One pre-training optimizer step over a batch of source frames: LiDAR and
/// camera streams forward, detection loss on the LiDAR head plus the
/// cross-modal feature consistency term, one SGD update on both encoders and
/// the head.
pub fn pretrain_step(
    model: &mut Model,
    opt: &mut Sgd,
    cfg: &TrainConfig,
    frames: &[&Frame],
) -> AdResult<StepStats> {
    cfg.validate()?;
    if cfg.stage != Stage::Pretrain {
        return Err(AdError::Contract {
            op: "pretrain_step",
            msg: format!("config is for stage {}", cfg.stage.as_str()),
        });
    }
    // Zero weight drops the camera stream entirely (plain-pretraining
    // ablation); frames must still carry images per the stage contract.
    let cmki_on = cfg.weights.lambda_cmki > 0.0;
    let mut acc = GradAccum::default();
    let mut stats = StepStats::default();
    let mut cmki_parts = Vec::new();
    for frame in frames {
        let Some(camera) = &frame.camera else {
            return Err(AdError::Contract {
                op: "pretrain_step",
                msg: format!("frame {} has no camera image", frame.id),
            });
        };
        let mut tape = Tape::new();
        let prefixes: &[&str] =
            if cmki_on { &["lidar.", "cam.", "head."] } else { &["lidar.", "head."] };
        let bound = bind_prefixes(&model.params, &mut tape, prefixes);
        let raw = tape.constant(raw_bev_tensor(&frame.cloud, model)?);
        let f_p = lidar_encoder_forward(&mut tape, &bound, raw, &model.config.lidar)?;
        let out = head_forward(&mut tape, &bound, f_p, &model.config.head)?;
        let (x, y) = model.bev_dims();
        let flat_boxes = tape.reshape(out.box_params, &[x * y, 8])?;
        let targets = assign_targets(&frame.labels, &model.config.grid);
        let det = det_loss(
            &mut tape,
            out.obj_logits,
            &targets.objectness,
            flat_boxes,
            &targets.positives,
            &targets.residuals,
        )?;
        let cmki = if cmki_on {
            let image = tape.constant(image_tensor(camera));
            let f_i = camera_bev_forward(
                &mut tape,
                &bound,
                image,
                &camera.intrinsics,
                &camera.extrinsics,
                &model.config.camera,
                &model.config.grid,
            )?;
            Some(cmki_loss(&mut tape, f_p, f_i)?)
        } else {
            None
        };
        let parts = LossParts { det, cmki, domain: None, entropy: None };
        let total = total_loss(&mut tape, &parts, &cfg.weights)?;
        stats.total += tape.value(total).item();
        stats.det += tape.value(det).item();
        cmki_parts.push(cmki.map(|c| tape.value(c).item()));
        tape.backward(total)?;
        acc.absorb(&tape, &bound);
        acc.frames += 1;
    }
    let n = frames.len().max(1) as f64;
    stats.total /= n;
    stats.det /= n;
    stats.cmki = mean_opt(&cmki_parts);
    opt.apply(&mut model.params, &acc, cfg.learning_rate);
    Ok(stats)
}

/// Whether this config runs the adversarial branch at all. Zero domain
/// weight collapses self-training to plain mixed-frame detection, so the
/// branch (discriminator and entropy term alike) is never built.
fn adversarial_on(cfg: &TrainConfig) -> bool {
    cfg.cdan && cfg.weights.lambda_d > 0.0
}

/// One self-training optimizer step over source/target frame pairs. Each
/// pair is sector-mixed at a sampled (θ, start); the LiDAR stream alone runs
/// forward. Detection loss covers all mixed labels; when the adversarial
/// branch is on, post-NMS instances above `disc_score` feed the domain
/// classifier through gradient reversal and the entropy penalty is applied
/// to the BEV map. Camera weights are never touched.
pub fn selftrain_step(
    model: &mut Model,
    opt: &mut Sgd,
    cfg: &TrainConfig,
    pairs: &[(&Frame, &Frame)],
    pseudo: &PseudoStore,
    rng: &mut ChaCha8Rng,
) -> AdResult<StepStats> {
    cfg.validate()?;
    if cfg.stage != Stage::Selftrain {
        return Err(AdError::Contract {
            op: "selftrain_step",
            msg: format!("config is for stage {}", cfg.stage.as_str()),
        });
    }
    let adversarial = adversarial_on(cfg);
    let entropic = adversarial && cfg.weights.lambda_ent > 0.0;
    let mut acc = GradAccum::default();
    let mut stats = StepStats::default();
    let mut domain_parts = Vec::new();
    let mut entropy_parts = Vec::new();
    for (source, target) in pairs {
        let theta = rng.gen_range(cfg.theta_range.0..=cfg.theta_range.1);
        let start = rng.gen_range(0.0..std::f64::consts::TAU);
        let labels = pseudo.get(&target.id).cloned().unwrap_or_default();
        let pseudo_frame = Frame {
            id: target.id.clone(),
            domain: target.domain,
            cloud: target.cloud.clone(),
            labels,
            camera: None,
        };
        let mixed = polar_mix(source, &pseudo_frame, theta, start);

        let mut tape = Tape::new();
        let prefixes: &[&str] =
            if adversarial { &["lidar.", "head.", "disc."] } else { &["lidar.", "head."] };
        let bound = bind_prefixes(&model.params, &mut tape, prefixes);
        let raw = tape.constant(raw_bev_tensor(&mixed.cloud, model)?);
        let f_p = lidar_encoder_forward(&mut tape, &bound, raw, &model.config.lidar)?;
        let out = head_forward(&mut tape, &bound, f_p, &model.config.head)?;
        let (x, y) = model.bev_dims();
        let flat_boxes = tape.reshape(out.box_params, &[x * y, 8])?;
        let mixed_boxes: Vec<_> = mixed.labels.iter().map(|(b, _)| *b).collect();
        let targets = assign_targets(&mixed_boxes, &model.config.grid);
        let det = det_loss(
            &mut tape,
            out.obj_logits,
            &targets.objectness,
            flat_boxes,
            &targets.positives,
            &targets.residuals,
        )?;

        let mut domain_part = None;
        if adversarial {
            let mut dets = decode(&tape, &out, &model.config.grid, cfg.disc_score);
            dets = nms(dets, NMS_IOU);
            assign_region(&mut dets, start, theta);
            if !dets.is_empty() {
                let cells: Vec<usize> = dets.iter().map(|d| d.cell).collect();
                let labels: Vec<usize> = dets
                    .iter()
                    .map(|d| match d.region {
                        Some(DomainKind::Source) => 0,
                        _ => 1,
                    })
                    .collect();
                let cf = model.config.head.feature_width;
                let flat_feats = tape.reshape(out.cell_features, &[x * y, cf])?;
                let instances = tape.gather_rows(flat_feats, &cells)?;
                let reversed = tape.grad_reverse(instances)?;
                let logits = disc_forward(&mut tape, &bound, reversed)?;
                let dl = domain_loss(&mut tape, logits, &labels)?;
                let values = tape.value(logits);
                for (i, &want) in labels.iter().enumerate() {
                    let row = &values.data()[i * 2..i * 2 + 2];
                    let got = usize::from(row[1] > row[0]);
                    stats.disc_correct += usize::from(got == want);
                    stats.disc_count += 1;
                }
                domain_part = Some(dl.loss);
            }
        }
        let entropy_part = if entropic { Some(entropy_loss(&mut tape, f_p)?) } else { None };

        let parts =
            LossParts { det, cmki: None, domain: domain_part, entropy: entropy_part };
        let total = total_loss(&mut tape, &parts, &cfg.weights)?;
        stats.total += tape.value(total).item();
        stats.det += tape.value(det).item();
        domain_parts.push(domain_part.map(|v| tape.value(v).item()));
        entropy_parts.push(entropy_part.map(|v| tape.value(v).item()));
        tape.backward(total)?;
        acc.absorb(&tape, &bound);
        acc.frames += 1;
    }
    let n = pairs.len().max(1) as f64;
    stats.total /= n;
    stats.det /= n;
    stats.domain = mean_opt(&domain_parts);
    stats.entropy = mean_opt(&entropy_parts);
    opt.apply(&mut model.params, &acc, cfg.learning_rate);
    Ok(stats)
}

/// LiDAR-only inference on one cloud: encode, head, decode, NMS.
pub fn infer(model: &Model, cloud: &PointCloud, score_thresh: f64) -> AdResult<Vec<Detection>> {
    let mut tape = Tape::new();
    let bound = bind_prefixes(&model.params, &mut tape, &["lidar.", "head."]);
    let raw = tape.constant(raw_bev_tensor(cloud, model)?);
    let f_p = lidar_encoder_forward(&mut tape, &bound, raw, &model.config.lidar)?;
    let out: HeadOutput = head_forward(&mut tape, &bound, f_p, &model.config.head)?;
    let dets = decode(&tape, &out, &model.config.grid, score_thresh);
    Ok(nms(dets, NMS_IOU))
}

/// Mean BEV feature per channel for one cloud — the embedding-space
/// signature a frame leaves in the LiDAR stream, for offline inspection.
pub fn pooled_bev(model: &Model, cloud: &PointCloud) -> AdResult<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = bind_prefixes(&model.params, &mut tape, &["lidar."]);
    let raw = tape.constant(raw_bev_tensor(cloud, model)?);
    let f_p = lidar_encoder_forward(&mut tape, &bound, raw, &model.config.lidar)?;
    let feats = tape.value(f_p);
    let dims = feats.shape();
    let (cells, channels) = (dims[0] * dims[1], dims[2]);
    let mut pooled = vec![0.0; channels];
    for cell in 0..cells {
        for (c, slot) in pooled.iter_mut().enumerate() {
            *slot += feats.data()[cell * channels + c];
        }
    }
    for slot in &mut pooled {
        *slot /= cells as f64;
    }
    Ok(pooled)
}

/// Rebuild the pseudo-label store for every target frame from the current
/// model: inference at the standard decode threshold, NMS, keep boxes with
/// score ≥ `t_pos`. Ground-truth labels on the frames are never consulted.
pub fn refresh_pseudo_labels(
    model: &Model,
    frames: &[Frame],
    t_pos: f64,
) -> AdResult<PseudoStore> {
    let mut store = PseudoStore::new();
    for frame in frames {
        let dets = infer(model, &frame.cloud, INFER_SCORE)?;
        let kept = make_pseudo_labels(&dets, t_pos);
        store.insert(frame.id.clone(), kept.boxes.into_iter().map(|(b, _)| b).collect());
    }
    Ok(store)
}

/// Evaluate the LiDAR detector against ground truth on held-out frames.
pub fn evaluate(model: &Model, frames: &[Frame], eval: &EvalSection) -> AdResult<EvalReport> {
    let mut ev = Evaluator::new(eval.iou_thresh);
    for frame in frames {
        let dets = infer(model, &frame.cloud, eval.score_thresh)?;
        let pairs: Vec<_> = dets.iter().map(|d| (d.box3d, d.score)).collect();
        ev.add_frame(&pairs, &frame.labels, &frame.cloud);
    }
    Ok(ev.report())
}

/// One evaluation round's outcome, serialized as one JSON line.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    /// 0 after pre-training, then 1.. per self-training round.
    pub round: usize,
    pub stage: String,
    /// Mean discriminator batch accuracy over the round's steps.
    pub disc_accuracy: Option<f64>,
    pub report: EvalReport,
}

/// Run the configured pre-training epochs from the current state.
pub fn run_pretrain(state: &mut TrainState, cfg: &TrainConfig, source: &[Frame]) -> AdResult<Vec<f64>> {
    cfg.validate()?;
    if state.stage != Stage::Pretrain {
        return Err(AdError::Contract {
            op: "run_pretrain",
            msg: "state has already advanced to self-training".into(),
        });
    }
    let mut epoch_losses = Vec::new();
    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let frames: Vec<&Frame> = chunk.iter().map(|&i| &source[i]).collect();
            let stats = pretrain_step(&mut state.model, &mut state.opt, cfg, &frames)?;
            sum += stats.total;
            steps += 1;
        }
        epoch_losses.push(sum / steps.max(1) as f64);
        state.epoch += 1;
    }
    Ok(epoch_losses)
}

/// One self-training round: refresh pseudo-labels when due, then the
/// configured epochs of mixed-frame steps. Returns the round's mean
/// discriminator accuracy, when any instances were classified.
pub fn run_selftrain_round(
    state: &mut TrainState,
    cfg: &TrainConfig,
    source: &[Frame],
    target: &[Frame],
) -> AdResult<Option<f64>> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(AdError::Contract {
            op: "selftrain_round",
            msg: "self-training needs frames in both domains".into(),
        });
    }
    if state.stage != Stage::Selftrain {
        state.stage = Stage::Selftrain;
        state.epoch = 0;
    }
    if state.round % cfg.refresh_period == 0 {
        state.pseudo = refresh_pseudo_labels(&state.model, target, cfg.t_pos)?;
    }
    let mut correct = 0usize;
    let mut count = 0usize;
    for _ in 0..cfg.epochs {
        let mut t_order: Vec<usize> = (0..target.len()).collect();
        t_order.shuffle(&mut state.rng);
        let mut s_order: Vec<usize> = (0..source.len()).collect();
        s_order.shuffle(&mut state.rng);
        for (step, chunk) in t_order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<(&Frame, &Frame)> = chunk
                .iter()
                .enumerate()
                .map(|(j, &ti)| {
                    let si = s_order[(step * cfg.batch_size + j) % s_order.len()];
                    (&source[si], &target[ti])
                })
                .collect();
            let stats = selftrain_step(
                &mut state.model,
                &mut state.opt,
                cfg,
                &pairs,
                &state.pseudo,
                &mut state.rng,
            )?;
            correct += stats.disc_correct;
            count += stats.disc_count;
        }
    }
    state.round += 1;
    Ok((count > 0).then(|| correct as f64 / count as f64))
}

/// Training and evaluation frames for one experiment.
pub struct ExperimentData {
    pub source_train: Vec<Frame>,
    pub target_train: Vec<Frame>,
    pub target_eval: Vec<Frame>,
}

/// Load frames behind a train manifest (both domains) and an eval manifest.
pub fn load_experiment_data(
    train_manifest: &Path,
    eval_manifest: &Path,
) -> Result<ExperimentData, SceneError> {
    let mut source_train = Vec::new();
    let mut target_train = Vec::new();
    for entry in read_manifest(train_manifest)? {
        let frame = load_frame(&entry.path)?;
        match entry.domain {
            DomainKind::Source => source_train.push(frame),
            DomainKind::Target => target_train.push(frame),
        }
    }
    let mut target_eval = Vec::new();
    for entry in read_manifest(eval_manifest)? {
        target_eval.push(load_frame(&entry.path)?);
    }
    Ok(ExperimentData { source_train, target_train, target_eval })
}

pub struct ExperimentOutcome {
    pub state: TrainState,
    pub rounds: Vec<RoundRecord>,
}

/// The full two-stage protocol: pre-train on source, evaluate (round 0 is
/// the direct-transfer measurement), then the configured number of
/// self-training rounds with a refresh and an evaluation per round. Zero
/// rounds therefore reports plain direct transfer.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, data: &ExperimentData) -> AdaptResult<ExperimentOutcome> {
    let model_config = cfg.model_config()?;
    let mut state = TrainState::new(model_config, seed);
    let pre = TrainConfig::pretrain(&cfg.pretrain, seed);
    run_pretrain(&mut state, &pre, &data.source_train)?;
    let mut rounds = Vec::new();
    rounds.push(RoundRecord {
        round: 0,
        stage: Stage::Pretrain.as_str().to_string(),
        disc_accuracy: None,
        report: evaluate(&state.model, &data.target_eval, &cfg.eval)?,
    });
    let st = TrainConfig::selftrain(&cfg.selftrain, seed);
    for _ in 0..cfg.selftrain.rounds {
        let acc = run_selftrain_round(&mut state, &st, &data.source_train, &data.target_train)?;
        rounds.push(RoundRecord {
            round: state.round,
            stage: Stage::Selftrain.as_str().to_string(),
            disc_accuracy: acc,
            report: evaluate(&state.model, &data.target_eval, &cfg.eval)?,
        });
    }
    Ok(ExperimentOutcome { state, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{points_in_box, Box3d};
    use crate::scene::{generate_scene, DomainSpec};

    fn small_experiment() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.voxel_size_xy = 9.4;
        cfg.model.voxel_size_z = 3.0;
        cfg.model.lidar_hidden = 6;
        cfg.model.bev_channels_per_voxel = 3;
        cfg.model.camera_hidden = 4;
        cfg.model.depth_bins = 4;
        cfg.model.feature_width = 8;
        cfg.model.disc_hidden = 6;
        cfg
    }

    fn small_model_config() -> ModelConfig {
        small_experiment().model_config().unwrap()
    }

    fn frames(kind: DomainKind, n: usize, seed: u64, from: u64) -> Vec<Frame> {
        let spec = match kind {
            DomainKind::Source => DomainSpec::source_preset(seed),
            DomainKind::Target => DomainSpec::target_preset(seed),
        };
        (0..n).map(|i| generate_scene(&spec, kind, from + i as u64).unwrap()).collect()
    }

    fn param_bits(model: &Model) -> Vec<(String, Vec<u64>)> {
        model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn constructors_force_stage_toggles() {
        let cfg = small_experiment();
        let pre = TrainConfig::pretrain(&cfg.pretrain, 1);
        assert!(pre.weights.t_cmki && !pre.weights.t_cdan);
        pre.validate().unwrap();
        let st = TrainConfig::selftrain(&cfg.selftrain, 1);
        assert!(!st.weights.t_cmki && st.weights.t_cdan);
        st.validate().unwrap();
        let mut broken = pre.clone();
        broken.weights.t_cdan = true;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn steps_reject_configs_for_the_other_stage() {
        let cfg = small_experiment();
        let mut model = Model::new(small_model_config(), 3);
        let mut opt = Sgd::new(MOMENTUM);
        let source = frames(DomainKind::Source, 1, 5, 0);
        let st = TrainConfig::selftrain(&cfg.selftrain, 1);
        let err = pretrain_step(&mut model, &mut opt, &st, &[&source[0]]).unwrap_err();
        assert!(err.to_string().contains("selftrain"), "{err}");
        let pre = TrainConfig::pretrain(&cfg.pretrain, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = selftrain_step(
            &mut model,
            &mut opt,
            &pre,
            &[(&source[0], &source[0])],
            &PseudoStore::new(),
            &mut rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains("pretrain"), "{err}");
    }

    #[test]
    fn pretrain_step_requires_a_camera() {
        let cfg = small_experiment();
        let mut model = Model::new(small_model_config(), 3);
        let mut opt = Sgd::new(MOMENTUM);
        let mut frame = frames(DomainKind::Source, 1, 5, 0).remove(0);
        frame.camera = None;
        let pre = TrainConfig::pretrain(&cfg.pretrain, 1);
        let err = pretrain_step(&mut model, &mut opt, &pre, &[&frame]).unwrap_err();
        assert!(err.to_string().contains("camera"), "{err}");
    }

    #[test]
    fn pretrain_loss_drops_on_a_fixed_frame_set() {
        let cfg = small_experiment();
        let mut pre = TrainConfig::pretrain(&cfg.pretrain, 11);
        pre.learning_rate = 0.05;
        let mut model = Model::new(small_model_config(), 11);
        let mut opt = Sgd::new(MOMENTUM);
        let source = frames(DomainKind::Source, 8, 21, 0);
        let mut first = None;
        let mut last = 0.0;
        for step in 0..50 {
            let lo = (2 * step) % 8;
            let batch = [&source[lo], &source[lo + 1]];
            let stats = pretrain_step(&mut model, &mut opt, &pre, &batch).unwrap();
            assert!(stats.total.is_finite());
            first.get_or_insert(stats.total);
            last = stats.total;
        }
        let first = first.unwrap();
        assert!(
            last < 0.7 * first,
            "loss failed to drop: first {first}, last {last}"
        );
    }

    #[test]
    fn selftrain_step_with_zero_instances_is_valid() {
        let cfg = small_experiment();
        let st = TrainConfig::selftrain(&cfg.selftrain, 7);
        let mut model = Model::new(small_model_config(), 7);
        // Push objectness so far down that nothing clears the decode floor.
        model.params.get_mut("head.bo").data_mut()[0] = -20.0;
        let mut opt = Sgd::new(MOMENTUM);
        let source = frames(DomainKind::Source, 1, 5, 0);
        let target = frames(DomainKind::Target, 1, 6, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = selftrain_step(
            &mut model,
            &mut opt,
            &st,
            &[(&source[0], &target[0])],
            &PseudoStore::new(),
            &mut rng,
        )
        .unwrap();
        assert!(stats.total.is_finite());
        assert_eq!(stats.disc_count, 0);
        assert_eq!(stats.domain, None);
        assert_eq!(stats.disc_accuracy(), None);
    }

    #[test]
    fn zero_domain_weight_matches_disabled_adversarial_run_bitwise() {
        let cfg = small_experiment();
        let source = frames(DomainKind::Source, 4, 5, 0);
        let target = frames(DomainKind::Target, 4, 6, 0);
        let mut zero_weight = TrainConfig::selftrain(&cfg.selftrain, 9);
        zero_weight.weights.lambda_d = 0.0;
        let mut disabled = TrainConfig::selftrain(&cfg.selftrain, 9);
        disabled.cdan = false;
        let run = |st: &TrainConfig| {
            let mut model = Model::new(small_model_config(), 9);
            let mut opt = Sgd::new(MOMENTUM);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for step in 0..20 {
                let pair = (&source[step % 4], &target[(step + 1) % 4]);
                selftrain_step(&mut model, &mut opt, st, &[pair], &PseudoStore::new(), &mut rng)
                    .unwrap();
            }
            param_bits(&model)
        };
        assert_eq!(run(&zero_weight), run(&disabled));
    }

    #[test]
    fn selftrain_never_reads_target_ground_truth() {
        let cfg = small_experiment();
        let st = TrainConfig::selftrain(&cfg.selftrain, 13);
        let source = frames(DomainKind::Source, 2, 5, 0);
        let target = frames(DomainKind::Target, 2, 6, 0);
        let mut tampered = target.clone();
        for frame in &mut tampered {
            frame.labels = vec![Box3d::new(3.0, 3.0, -1.0, 9.0, 9.0, 3.0, 1.0, 0).unwrap()];
        }
        let run = |target: &[Frame]| {
            let mut model = Model::new(small_model_config(), 13);
            let mut opt = Sgd::new(MOMENTUM);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let pseudo = PseudoStore::new();
            for step in 0..6 {
                let pair = (&source[step % 2], &target[step % 2]);
                selftrain_step(&mut model, &mut opt, &st, &[pair], &pseudo, &mut rng).unwrap();
            }
            param_bits(&model)
        };
        assert_eq!(run(&target), run(&tampered));
    }

    #[test]
    fn refresh_is_empty_for_a_zero_weight_model_and_deterministic() {
        let mut model = Model::new(small_model_config(), 17);
        for (_, tensor) in model.params.iter_mut() {
            tensor.data_mut().fill(0.0);
        }
        let target = frames(DomainKind::Target, 3, 6, 0);
        let store = refresh_pseudo_labels(&model, &target, T_POS).unwrap();
        assert_eq!(store.len(), 3);
        assert!(store.values().all(|v| v.is_empty()));
        let again = refresh_pseudo_labels(&model, &target, T_POS).unwrap();
        assert_eq!(store, again);
    }

    #[test]
    fn refresh_labels_most_visible_objects_after_supervised_target_training() {
        // Oracle protocol: pre-training-style supervision on the target
        // domain itself, then pseudo-labels should land on most frames that
        // have a clearly visible object.
        let mut cfg = small_experiment();
        cfg.model.voxel_size_xy = 2.35;
        cfg.model.lidar_hidden = 16;
        cfg.model.bev_channels_per_voxel = 8;
        cfg.model.feature_width = 32;
        let pre = TrainConfig::pretrain(&cfg.pretrain, 23);
        let mut model = Model::new(cfg.model_config().unwrap(), 23);
        let mut opt = Sgd::new(MOMENTUM);
        let target = frames(DomainKind::Target, 8, 31, 0);
        for step in 0..2400 {
            let lo = (2 * step) % 8;
            let batch = [&target[lo], &target[lo + 1]];
            pretrain_step(&mut model, &mut opt, &pre, &batch).unwrap();
        }
        let store = refresh_pseudo_labels(&model, &target, T_POS).unwrap();
        let mut visible = 0usize;
        let mut labeled = 0usize;
        for frame in &target {
            let has_visible = frame
                .labels
                .iter()
                .any(|b| points_in_box(&frame.cloud.points, b).len() >= 5);
            if has_visible {
                visible += 1;
                if !store[&frame.id].is_empty() {
                    labeled += 1;
                }
            }
        }
        assert!(visible > 0, "test scenes produced no visible objects");
        assert!(
            labeled * 5 >= visible * 4,
            "pseudo-labels on {labeled}/{visible} frames with visible objects"
        );
    }

    #[test]
    fn checkpoint_resume_reproduces_the_next_step_bitwise() {
        let cfg = small_experiment();
        let st = TrainConfig::selftrain(&cfg.selftrain, 29);
        let source = frames(DomainKind::Source, 2, 5, 0);
        let target = frames(DomainKind::Target, 2, 6, 0);
        let mut state = TrainState::new(small_model_config(), 29);
        state.stage = Stage::Selftrain;
        for step in 0..3 {
            let pair = (&source[step % 2], &target[step % 2]);
            selftrain_step(&mut state.model, &mut state.opt, &st, &[pair], &state.pseudo, &mut state.rng)
                .unwrap();
        }
        let bytes = checkpoint::encode(&state);
        let mut resumed = checkpoint::decode(&bytes, &small_model_config()).unwrap();
        let pair = (&source[1], &target[1]);
        selftrain_step(&mut state.model, &mut state.opt, &st, &[pair], &state.pseudo, &mut state.rng)
            .unwrap();
        selftrain_step(
            &mut resumed.model,
            &mut resumed.opt,
            &st,
            &[pair],
            &resumed.pseudo,
            &mut resumed.rng,
        )
        .unwrap();
        assert_eq!(param_bits(&state.model), param_bits(&resumed.model));
        let va: Vec<_> = state.opt.velocities().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
        let vb: Vec<_> = resumed.opt.velocities().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
        assert_eq!(va, vb);
    }

    #[test]
    fn experiments_are_deterministic_and_zero_rounds_is_direct_transfer() {
        let mut cfg = small_experiment();
        cfg.pretrain.epochs = 1;
        cfg.pretrain.batch_size = 2;
        cfg.selftrain.rounds = 1;
        cfg.selftrain.epochs = 1;
        let data = ExperimentData {
            source_train: frames(DomainKind::Source, 4, 5, 0),
            target_train: frames(DomainKind::Target, 4, 6, 0),
            target_eval: frames(DomainKind::Target, 2, 6, 4),
        };
        let a = run_experiment(&cfg, 31, &data).unwrap();
        let b = run_experiment(&cfg, 31, &data).unwrap();
        assert_eq!(a.rounds.len(), 2);
        assert_eq!(
            serde_json::to_string(&a.rounds).unwrap(),
            serde_json::to_string(&b.rounds).unwrap()
        );
        assert_eq!(param_bits(&a.state.model), param_bits(&b.state.model));

        let mut direct = cfg.clone();
        direct.selftrain.rounds = 0;
        let d = run_experiment(&direct, 31, &data).unwrap();
        assert_eq!(d.rounds.len(), 1);
        assert_eq!(d.rounds[0].stage, "pretrain");
        assert_eq!(d.rounds[0].round, 0);
        assert_eq!(
            serde_json::to_string(&d.rounds[0]).unwrap(),
            serde_json::to_string(&a.rounds[0]).unwrap()
        );
    }

}
