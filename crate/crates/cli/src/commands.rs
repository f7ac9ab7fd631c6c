use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use curate_core::contrastive::{
    background_prototypes, contrastive_loss, foreground_prototypes, sample_queries, PrototypeBank, SourceView, TargetView,
};
use curate_core::density::{build_density_map, estimate_count, nms_peaks, next_detection_round, DetectionParams, DetectionRoundState};
use curate_core::ipl::{connected_components, segmentation_round, SegRoundState};
use curate_core::metrics::{aji_match, cross_entropy_masked, dice, l2_masked, pq, total_objective};
use curate_core::pipeline::{run_pipeline, run_round, RunOptions};
use curate_core::synth::{generate_scene, SceneSpec};
use curate_core::{
    DensityMap, FeatureMap, InstanceMap, LabelMap, PipelineConfig, PointSet, ProbMap, Provenance, TensorFile, FOREGROUND,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::{Cli, Command, ConfigArg, PredKind};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for the scene tensors and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON scene spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub prob_noise: Option<f64>,
    #[arg(long)]
    pub fp_blobs: Option<usize>,
    #[arg(long)]
    pub fn_drop: Option<f64>,
    #[arg(long)]
    pub point_fraction: Option<f64>,
    #[arg(long)]
    pub point_jitter: Option<f64>,
    #[arg(long)]
    pub density_noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PrototypeArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub prob: PathBuf,
    /// Ground-truth points of the target image.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub pseudo_label: PathBuf,
    #[arg(long, requires_all = ["source_labels", "source_prob"])]
    pub source_features: Option<PathBuf>,
    #[arg(long)]
    pub source_labels: Option<PathBuf>,
    #[arg(long)]
    pub source_prob: Option<PathBuf>,
    /// Training iteration the bank is built at.
    #[arg(long, default_value_t = 0)]
    pub iteration: u64,
    /// Output `.npy` stack; a `.json` sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

fn load_config(arg: &ConfigArg) -> Result<PipelineConfig> {
    Ok(match &arg.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(args: SynthArgs) -> Result<Value> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|_| curate_core::Error::MissingFile(path.clone()))?;
            serde_json::from_str::<SceneSpec>(&text)
                .map_err(|e| curate_core::Error::InvalidParameter(format!("scene spec: {e}")))?
        }
        None => SceneSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.height {
        spec.shape.0 = v;
    }
    if let Some(v) = args.width {
        spec.shape.1 = v;
    }
    if let Some(v) = args.instances {
        spec.n_instances = v;
    }
    if let Some(v) = args.prob_noise {
        spec.prob_noise = v;
    }
    if let Some(v) = args.fp_blobs {
        spec.fp_blobs = v;
    }
    if let Some(v) = args.fn_drop {
        spec.fn_drop = v;
    }
    if let Some(v) = args.point_fraction {
        spec.point_fraction = v;
    }
    if let Some(v) = args.point_jitter {
        spec.point_jitter = v;
    }
    if let Some(v) = args.density_noise {
        spec.density_noise = v;
    }
    let scene = generate_scene(&spec)?;
    scene.write_dir(&args.out)?;
    Ok(json!({
        "out": args.out,
        "instances": scene.gt.count(),
        "weak_points": scene.weak_points.len(),
        "dropped": scene.dropped,
    }))
}

fn nms(density: &Path, min_distance: Option<usize>, max_peaks: Option<usize>, min_value: Option<f64>, sigma: f64, out: &Path) -> Result<Value> {
    let d = DensityMap::load(density)?;
    let defaults = DetectionParams::for_sigma(sigma)?;
    let peaks = nms_peaks(
        &d,
        min_distance.unwrap_or(defaults.min_distance),
        max_peaks.unwrap_or(usize::MAX),
        min_value.unwrap_or(defaults.min_value),
    )?;
    peaks.store(out)?;
    Ok(json!({ "peaks": peaks.len(), "estimated_count": estimate_count(&d), "out": out }))
}

fn detect_round(
    round: usize,
    points: &Path,
    accepted: Option<&Path>,
    reference_count: Option<usize>,
    pred: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
) -> Result<Value> {
    let gt = PointSet::load(points)?;
    let pred = DensityMap::load(pred)?;
    let params = config.detection_params()?;
    let state = if round == 0 {
        if accepted.is_some() {
            bail!(curate_core::Error::RoundOrder("round 0 starts from ground truth; drop --accepted".into()));
        }
        DetectionRoundState::new(gt.clone(), params)?
    } else {
        let Some(accepted) = accepted else {
            bail!(curate_core::Error::RoundOrder(format!("round {round} needs --accepted from round {}", round - 1)));
        };
        let accepted = PointSet::load(accepted)?;
        if accepted.count_of(Provenance::GroundTruth) != gt.len() || gt.iter().any(|p| !accepted.contains_pixel(p.row, p.col)) {
            bail!(curate_core::Error::Invariant("accepted points do not contain the ground truth".into()));
        }
        DetectionRoundState { round_index: round, accepted_points: accepted, reference_count, params }
    };
    let result = next_detection_round(&state, &pred)?;
    create_dir(out_dir)?;
    result.state.accepted_points.store(out_dir.join("accepted_points.npy"))?;
    result.target.store(out_dir.join("det_target.npy"))?;
    result.loss_mask.store(out_dir.join("det_mask.npy"))?;
    Ok(json!({
        "round": round,
        "estimated_count": result.estimated_count,
        "added": result.added.len(),
        "ground_truth_points": result.state.accepted_points.count_of(Provenance::GroundTruth),
        "pseudo_points": result.state.pseudo_count(),
        "reference_count": result.state.reference_count,
        "out_dir": out_dir,
    }))
}

fn seg_round(round: usize, prob: &Path, density: &Path, points: &Path, out_dir: &Path, config: &PipelineConfig) -> Result<Value> {
    let p = ProbMap::load(prob)?;
    let d = DensityMap::load(density)?;
    let gt = PointSet::load(points)?;
    let state = SegRoundState::at_round(config.seg_params()?, round)?;
    let result = segmentation_round(&state, &p, &d, &gt)?;
    create_dir(out_dir)?;
    result.pseudo_label.store(out_dir.join("pseudo_label.npy"))?;
    result.omega.store(out_dir.join("omega.npy"))?;
    result.kept.store(out_dir.join("kept_instances.npy"))?;
    Ok(json!({
        "round": round,
        "fraction": result.fraction,
        "omega_points": result.omega.len(),
        "omega_pseudo": result.omega.count_of(Provenance::Pseudo),
        "candidates": result.candidates.count(),
        "kept": result.kept.count(),
        "conflicts": result.conflicts.len(),
        "out_dir": out_dir,
    }))
}

fn prototypes(args: &PrototypeArgs, config: &PipelineConfig) -> Result<Value> {
    let z = FeatureMap::load(&args.features)?;
    let p = ProbMap::load(&args.prob)?;
    let gt = PointSet::load(&args.points)?;
    let pl = LabelMap::load(&args.pseudo_label)?;
    let source = match (&args.source_features, &args.source_labels, &args.source_prob) {
        (Some(f), Some(l), Some(sp)) => Some((FeatureMap::load(f)?, LabelMap::load(l)?, ProbMap::load(sp)?)),
        _ => None,
    };
    let view = source.as_ref().map(|(f, l, sp)| SourceView { features: f, labels: l, prob: sp });
    let fg = foreground_prototypes(view, TargetView { features: &z, points: &gt, prob: &p, pseudo_label: &pl }, config.delta_e)?;
    let bg = background_prototypes(&z, &pl, &config.kmeans_config())?;
    let bank = PrototypeBank::new(fg, bg, args.iteration, config.prototype_refresh_period);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    bank.store(&args.out)?;
    let names = |members: &[(curate_core::contrastive::Slot, Vec<f64>)]| members.iter().map(|(s, _)| s.name()).collect::<Vec<_>>();
    Ok(json!({
        "out": args.out,
        "channels": bank.channels(),
        "foreground": names(&bank.foreground.members),
        "background": names(&bank.background.members),
        "built_at": bank.built_at,
    }))
}

fn contrast(bank: &Path, features: &Path, labels: &Path, prob: &Path, tau: Option<f64>, seed: Option<u64>, config: &PipelineConfig) -> Result<Value> {
    let bank = PrototypeBank::load(bank)?;
    let z = FeatureMap::load(features)?;
    let y = LabelMap::load(labels)?;
    let p = ProbMap::load(prob)?;
    let tau = tau.unwrap_or(config.tau);
    let seed = seed.unwrap_or(config.seed);
    let params = config.query_params();
    let sets = (0..2u8)
        .map(|c| sample_queries(&z, &y, &p, c, &params, seed.wrapping_add(c as u64)))
        .collect::<curate_core::Result<Vec<_>>>()?;
    let loss = contrastive_loss(&sets, &bank, tau)?;
    Ok(json!({
        "loss": loss,
        "tau": tau,
        "queries": sets.iter().map(|s| json!({"class_id": s.class_id, "easy": s.easy.len(), "hard": s.hard.len()})).collect::<Vec<_>>(),
    }))
}

#[allow(clippy::too_many_arguments)]
fn losses(
    prob: &Path,
    labels: &Path,
    pred_density: Option<&Path>,
    target_density: Option<&Path>,
    mask: Option<&Path>,
    contrastive: f64,
    config: &PipelineConfig,
) -> Result<Value> {
    let seg = cross_entropy_masked(&ProbMap::load(prob)?, &LabelMap::load(labels)?)?;
    let det = match (pred_density, target_density, mask) {
        (Some(a), Some(b), Some(m)) => l2_masked(&DensityMap::load(a)?, &DensityMap::load(b)?, &LabelMap::load(m)?)?,
        _ => 0.0,
    };
    let total = total_objective(seg, det, contrastive, &config.weights())?;
    Ok(json!({
        "segmentation": seg,
        "detection": det,
        "contrastive": contrastive,
        "lambda1": config.lambda1,
        "lambda2": config.lambda2,
        "total": total,
    }))
}

fn load_prediction(path: &Path, kind: PredKind) -> Result<InstanceMap> {
    Ok(match kind {
        PredKind::Instances => InstanceMap::load(path)?,
        PredKind::Mask => {
            let labels = LabelMap::load(path)?;
            let fg = LabelMap::new(labels.grid().map(|&v| (v == FOREGROUND) as u8))?;
            connected_components(&fg, curate_core::Connectivity::Eight)?
        }
    })
}

fn evaluate(preds: &[PathBuf], gts: &[PathBuf], kind: PredKind) -> Result<Value> {
    if preds.len() != gts.len() {
        bail!(curate_core::Error::InvalidParameter(format!("{} predictions but {} ground truths", preds.len(), gts.len())));
    }
    let per_image = preds
        .par_iter()
        .zip(gts)
        .map(|(pp, gp)| -> Result<Value> {
            let p = load_prediction(pp, kind)?;
            let g = InstanceMap::load(gp)?;
            let d = dice(&p.to_mask(), &g.to_mask())?;
            let (a, _) = aji_match(&p, &g)?;
            let (q, m) = pq(&p, &g)?;
            Ok(json!({
                "pred": pp,
                "gt": gp,
                "dice": d,
                "aji": a,
                "pq": q,
                "tp": m.pairs.len(),
                "fp": m.unmatched_pred.len(),
                "fn": m.unmatched_gt.len(),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |key: &str| per_image.iter().map(|v| v[key].as_f64().unwrap_or(0.0)).sum::<f64>() / per_image.len() as f64;
    Ok(json!({
        "dice": mean("dice"),
        "aji": mean("aji"),
        "pq": mean("pq"),
        "per_image": per_image,
    }))
}

pub fn run(cli: Cli) -> Result<Value> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!(curate_core::Error::InvalidParameter("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| curate_core::Error::Internal(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(args) => synth(args),
        Command::Density { points, height, width, sigma, out } => {
            let pts = PointSet::load(&points)?;
            let d = build_density_map(&pts, (height, width), sigma)?;
            d.store(&out)?;
            Ok(json!({ "points": pts.len(), "mass": d.mass(), "estimated_count": estimate_count(&d), "out": out }))
        }
        Command::Nms { density, min_distance, max_peaks, min_value, sigma, out } => {
            nms(&density, min_distance, max_peaks, min_value, sigma, &out)
        }
        Command::DetectRound { round, points, accepted, reference_count, pred, out_dir, config } => {
            let config = load_config(&config)?;
            detect_round(round, &points, accepted.as_deref(), reference_count, &pred, &out_dir, &config)
        }
        Command::SegRound { round, prob, density, points, out_dir, config } => {
            seg_round(round, &prob, &density, &points, &out_dir, &load_config(&config)?)
        }
        Command::Prototypes(args) => {
            let config = load_config(&args.config)?;
            prototypes(&args, &config)
        }
        Command::ContrastLoss { bank, features, labels, prob, tau, seed, config } => {
            contrast(&bank, &features, &labels, &prob, tau, seed, &load_config(&config)?)
        }
        Command::Losses { prob, labels, pred_density, target_density, mask, contrastive, config } => losses(
            &prob,
            &labels,
            pred_density.as_deref(),
            target_density.as_deref(),
            mask.as_deref(),
            contrastive,
            &load_config(&config)?,
        ),
        Command::Evaluate { pred, gt, pred_kind } => evaluate(&pred, &gt, pred_kind),
        Command::RunPipeline { workdir, round, iteration, config } => {
            let config = load_config(&config)?;
            let options = RunOptions { jobs: None, iteration };
            let summary = match round {
                Some(r) => run_round(&config, &workdir, r, &options)?,
                None => run_pipeline(&config, &workdir, None, &options)?.pop().expect("at least one round"),
            };
            Ok(serde_json::to_value(summary)?)
        }
    }
}
