//! The five subcommand bodies. All output paths come from [`Layout`]; every
//! command rewrites its artifacts wholesale so reruns are idempotent.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use cmda::adapt::{
    checkpoint, evaluate, infer, load_experiment_data, pooled_bev, run_pretrain,
    run_selftrain_round, Model, RoundRecord, Stage, TrainConfig, TrainState,
};
use cmda::config::{parse_config, EvalSection, ExperimentConfig};
use cmda::eval::{closed_gap, report_csv, EvalReport, Evaluator};
use cmda::scene::{
    generate_scene, load_frame, read_manifest, save_frame, write_manifest, DomainKind, DomainSpec,
    Frame,
};
use serde_json::{json, Value};

use crate::layout::Layout;
use crate::{CliError, Common, EvalMode, PretrainMode};

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let Some(path) = &common.config else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn ap100(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_else(|| "n/a".into())
}

/// Run `f` over items, optionally on a dedicated pool. Output order always
/// matches input order, so worker count never changes any artifact.
fn map_ordered<I, T, F>(workers: usize, items: &[I], f: F) -> Result<Vec<T>, CliError>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> Result<T, CliError> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(runtime)?;
    pool.install(|| items.par_iter().map(f).collect())
}

pub fn generate(common: &Common, workers: usize) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let mut dataset = cfg.dataset.clone();
    if let Some(seed) = common.seed {
        dataset.seed = seed;
    }
    let source_spec = dataset.source_spec();
    let target_spec = dataset.target_spec();
    let layout = Layout::new(&common.out);

    // (spec, domain, scene index, file group, file index); eval scenes start
    // where training scenes end so the splits never share a scene.
    let mut jobs: Vec<(&DomainSpec, DomainKind, u64, &str, usize)> = Vec::new();
    for i in 0..dataset.train_frames {
        jobs.push((&source_spec, DomainKind::Source, i as u64, "source", i));
    }
    for i in 0..dataset.train_frames {
        jobs.push((&target_spec, DomainKind::Target, i as u64, "target", i));
    }
    for i in 0..dataset.eval_frames {
        jobs.push((&target_spec, DomainKind::Target, (dataset.train_frames + i) as u64, "eval", i));
    }

    let frames = map_ordered(workers, &jobs, |&(spec, domain, index, _, _)| {
        generate_scene(spec, domain, index).map_err(CliError::from)
    })?;

    fs::create_dir_all(layout.frames_dir())
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", layout.frames_dir().display())))?;
    let mut train_entries = Vec::new();
    let mut eval_entries = Vec::new();
    for (&(_, domain, _, group, index), frame) in jobs.iter().zip(&frames) {
        save_frame(frame, &layout.frame_file(group, index))?;
        let entry = (domain, layout.frame_rel(group, index));
        if group == "eval" {
            eval_entries.push(entry);
        } else {
            train_entries.push(entry);
        }
    }
    write_manifest(&layout.train_manifest(), &train_entries)?;
    write_manifest(&layout.eval_manifest(), &eval_entries)?;

    // Stats come from re-reading what landed on disk, not from the frames in
    // memory, so they double as a decode check.
    for group in ["source", "target", "eval"] {
        let count = match group {
            "eval" => dataset.eval_frames,
            _ => dataset.train_frames,
        };
        let mut points = 0usize;
        let mut objects = 0usize;
        for index in 0..count {
            let frame = load_frame(&layout.frame_file(group, index))?;
            points += frame.cloud.points.len();
            objects += frame.labels.len();
        }
        let denom = count.max(1) as f64;
        println!(
            "{group}: {count} frames, mean points {:.1}, mean objects {:.2}",
            points as f64 / denom,
            objects as f64 / denom
        );
    }
    Ok(())
}

fn load_data(cfg_layout: &Layout) -> Result<cmda::adapt::ExperimentData, CliError> {
    let train = cfg_layout.train_manifest();
    if !train.exists() {
        return Err(CliError::Runtime(format!(
            "no dataset manifest at {}; run `cmda generate` first",
            train.display()
        )));
    }
    load_experiment_data(&train, &cfg_layout.eval_manifest()).map_err(CliError::from)
}

pub fn pretrain(common: &Common, mode: PretrainMode) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(cfg.dataset.seed);
    let layout = Layout::new(&common.out);
    let data = load_data(&layout)?;

    let mut train_cfg = TrainConfig::pretrain(&cfg.pretrain, seed);
    let (frames, label) = match mode {
        PretrainMode::Cmki => (&data.source_train, "source, cross-modal term on"),
        PretrainMode::Plain => {
            train_cfg.weights.lambda_cmki = 0.0;
            (&data.source_train, "source, cross-modal term off")
        }
        PretrainMode::Oracle => (&data.target_train, "target-supervised reference"),
    };
    if frames.is_empty() {
        return Err(CliError::Runtime("training split is empty".into()));
    }
    println!("pre-training ({label}): {} frames, {} epochs", frames.len(), train_cfg.epochs);

    let mut state = TrainState::new(cfg.model_config()?, seed);
    let losses = run_pretrain(&mut state, &train_cfg, frames).map_err(CliError::from)?;
    for (i, loss) in losses.iter().enumerate() {
        println!("epoch {:>2}/{}: mean loss {loss:.4}", i + 1, losses.len());
    }

    let ckpt = layout.checkpoint(mode.artifact());
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent).map_err(runtime)?;
    }
    checkpoint::save(&ckpt, &state)?;

    let report = evaluate(&state.model, &data.target_eval, &cfg.eval).map_err(CliError::from)?;
    println!("target eval: BEV AP {}, 3D AP {}", ap100(report.bev_ap), ap100(report.ap_3d));
    let record = RoundRecord {
        round: 0,
        stage: Stage::Pretrain.as_str().to_string(),
        disc_accuracy: None,
        report,
    };
    let line = serde_json::to_string(&record).map_err(runtime)?;
    write_file(&layout.metrics(mode.artifact()), line + "\n")?;
    println!("saved {}", ckpt.display());
    Ok(())
}

pub fn selftrain(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(cfg.dataset.seed);
    let layout = Layout::new(&common.out);
    let data = load_data(&layout)?;

    let pre_ckpt = layout.checkpoint("pretrain");
    if !pre_ckpt.exists() {
        return Err(CliError::Runtime(format!(
            "self-training needs the pre-training checkpoint at {}; run `cmda pretrain` first",
            pre_ckpt.display()
        )));
    }
    let mut state = checkpoint::load(&pre_ckpt, &cfg.model_config()?)?;
    let train_cfg = TrainConfig::selftrain(&cfg.selftrain, seed);
    println!(
        "self-training: {} rounds × {} epochs over {} target frames",
        cfg.selftrain.rounds,
        train_cfg.epochs,
        data.target_train.len()
    );

    let mut lines = String::new();
    for _ in 0..cfg.selftrain.rounds {
        let acc = run_selftrain_round(&mut state, &train_cfg, &data.source_train, &data.target_train)
            .map_err(CliError::from)?;
        let report = evaluate(&state.model, &data.target_eval, &cfg.eval).map_err(CliError::from)?;
        let labels: usize = state.pseudo.values().map(Vec::len).sum();
        println!(
            "round {}: disc accuracy {}, pseudo labels {labels}, BEV AP {}, 3D AP {}",
            state.round,
            acc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into()),
            ap100(report.bev_ap),
            ap100(report.ap_3d)
        );
        let record = RoundRecord {
            round: state.round,
            stage: Stage::Selftrain.as_str().to_string(),
            disc_accuracy: acc,
            report,
        };
        lines.push_str(&serde_json::to_string(&record).map_err(runtime)?);
        lines.push('\n');
    }

    let ckpt = layout.checkpoint("selftrain");
    checkpoint::save(&ckpt, &state)?;
    write_file(&layout.metrics("selftrain"), lines)?;
    println!("saved {}", ckpt.display());
    Ok(())
}

fn eval_report(
    model: &Model,
    frames: &[Frame],
    sec: &EvalSection,
    workers: usize,
) -> Result<EvalReport, CliError> {
    let dets = map_ordered(workers, frames, |frame| {
        infer(model, &frame.cloud, sec.score_thresh).map_err(runtime)
    })?;
    let mut ev = Evaluator::new(sec.iou_thresh);
    for (frame, d) in frames.iter().zip(&dets) {
        let pairs: Vec<_> = d.iter().map(|x| (x.box3d, x.score)).collect();
        ev.add_frame(&pairs, &frame.labels, &frame.cloud);
    }
    Ok(ev.report())
}

pub fn eval(
    common: &Common,
    checkpoint_path: Option<&Path>,
    mode: EvalMode,
    workers: usize,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let layout = Layout::new(&common.out);
    let ckpt: PathBuf =
        checkpoint_path.map_or_else(|| layout.checkpoint(mode.default_checkpoint()), Path::to_path_buf);
    if !ckpt.exists() {
        return Err(CliError::Runtime(format!("no checkpoint at {}", ckpt.display())));
    }
    let state = checkpoint::load(&ckpt, &cfg.model_config()?)?;
    if matches!(mode, EvalMode::Direct | EvalMode::Oracle) && state.stage != Stage::Pretrain {
        return Err(CliError::Runtime(format!(
            "{} evaluation needs a pretrain-stage checkpoint, but {} holds stage {}",
            mode.report(),
            ckpt.display(),
            state.stage.as_str()
        )));
    }

    let entries = read_manifest(&layout.eval_manifest())?;
    let frames = entries
        .iter()
        .map(|e| load_frame(&e.path).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    let report = eval_report(&state.model, &frames, &cfg.eval, workers)?;

    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = if stem == mode.default_checkpoint() {
        mode.report().to_string()
    } else {
        format!("{stem}-{}", mode.report())
    };
    let json_path = layout.report_json(&name);
    let mut body = serde_json::to_string_pretty(&report).map_err(runtime)?;
    body.push('\n');
    write_file(&json_path, body)?;
    write_file(&layout.report_csv(&name), report_csv(&report))?;
    println!(
        "{}: BEV AP {}, 3D AP {} → {}",
        mode.report(),
        ap100(report.bev_ap),
        ap100(report.ap_3d),
        json_path.display()
    );

    write_summary(&layout)?;
    Ok(())
}

/// Once direct, adapted, and oracle reports all exist, derive the closed-gap
/// summary from the files themselves.
fn write_summary(layout: &Layout) -> Result<(), CliError> {
    let mut aps = Vec::new();
    for name in ["direct", "adapted", "oracle"] {
        let path = layout.report_json(name);
        if !path.exists() {
            return Ok(());
        }
        let text = fs::read_to_string(&path).map_err(runtime)?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let bev = value.get("bev_ap").and_then(Value::as_f64);
        let ap3d = value.get("ap_3d").and_then(Value::as_f64);
        let (Some(bev), Some(ap3d)) = (bev, ap3d) else {
            println!("summary skipped: {} has no AP values", path.display());
            return Ok(());
        };
        aps.push((name, bev, ap3d));
    }
    let find = |name: &str| aps.iter().find(|(n, _, _)| *n == name).copied().unwrap();
    let (_, d_bev, d_3d) = find("direct");
    let (_, a_bev, a_3d) = find("adapted");
    let (_, o_bev, o_3d) = find("oracle");
    let (Ok(gap_bev), Ok(gap_3d)) =
        (closed_gap(a_bev, d_bev, o_bev), closed_gap(a_3d, d_3d, o_3d))
    else {
        println!("summary skipped: oracle and direct APs coincide");
        return Ok(());
    };
    let summary = json!({
        "direct": {"bev_ap": d_bev, "ap_3d": d_3d},
        "adapted": {"bev_ap": a_bev, "ap_3d": a_3d},
        "oracle": {"bev_ap": o_bev, "ap_3d": o_3d},
        "closed_gap_bev": gap_bev,
        "closed_gap_3d": gap_3d,
    });
    let mut body = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    body.push('\n');
    write_file(&layout.summary(), body)?;
    println!("closed gap: BEV {gap_bev:.1}%, 3D {gap_3d:.1}% → {}", layout.summary().display());
    Ok(())
}

pub fn dump_features(common: &Common, checkpoint_path: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let layout = Layout::new(&common.out);
    let ckpt: PathBuf =
        checkpoint_path.map_or_else(|| layout.checkpoint("pretrain"), Path::to_path_buf);
    if !ckpt.exists() {
        return Err(CliError::Runtime(format!("no checkpoint at {}", ckpt.display())));
    }
    let state = checkpoint::load(&ckpt, &cfg.model_config()?)?;

    let width = state.model.config.lidar.out_channels;
    let mut csv = String::from("frame_id,domain");
    for c in 0..width {
        csv.push_str(&format!(",f{c}"));
    }
    csv.push('\n');
    let entries = read_manifest(&layout.train_manifest())?;
    for entry in &entries {
        let frame = load_frame(&entry.path)?;
        let pooled = pooled_bev(&state.model, &frame.cloud).map_err(runtime)?;
        csv.push_str(&frame.id);
        csv.push(',');
        csv.push_str(frame.domain.as_str());
        for v in pooled {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_file(&layout.features(), csv)?;
    println!("wrote {} rows × {} columns to {}", entries.len(), width + 2, layout.features().display());
    Ok(())
}
