//! Round-by-round curation over a working directory.
//!
//! Layout (every tensor is `.npy`):
//!
//! ```text
//! images/<id>/points.npy               weak ground-truth points
//! images/<id>/gt_instances.npy         optional, enables metrics
//! source/{features,labels,prob}.npy    optional labelled source image
//! rounds/<r>/inputs/<id>/{prob,density,features}.npy
//! rounds/<r>/outputs/<id>/...          written by round r
//! rounds/<r>/summary.json              written last; marks round r complete
//! ```
//!
//! Round `r` reads the outputs of round `r - 1`, so rerunning a finished round
//! reproduces its outputs exactly.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::contrastive::{
    background_prototypes, contrastive_loss, foreground_prototypes, sample_queries, PrototypeBank, SourceView,
    TargetView,
};
use crate::density::{next_detection_round, DetectionRoundState};
use crate::error::{Error, Result};
use crate::ipl::{binarize, connected_components, segmentation_round, SegRoundState};
use crate::metrics::{aji, cross_entropy_masked, dice, l2_masked, pq, total_objective};
use crate::tensor_io::TensorFile;
use crate::types::{DensityMap, FeatureMap, InstanceMap, LabelMap, PointSet, ProbMap, FOREGROUND};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// File names inside `rounds/<r>/outputs/<id>/`.
pub mod outputs {
    pub const ACCEPTED_POINTS: &str = "accepted_points.npy";
    pub const DET_TARGET: &str = "det_target.npy";
    pub const DET_MASK: &str = "det_mask.npy";
    pub const DET_STATE: &str = "det_state.json";
    pub const PSEUDO_LABEL: &str = "pseudo_label.npy";
    pub const OMEGA: &str = "omega.npy";
    pub const PROTOTYPES: &str = "prototypes.npy";
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub jobs: Option<usize>,
    /// Training iteration recorded on the prototype banks.
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub estimated_count: usize,
    pub added: usize,
    pub pseudo_points: usize,
    pub total_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub fraction: f64,
    pub omega_points: usize,
    pub candidates: u32,
    pub kept: u32,
    pub conflicts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub segmentation: f64,
    pub detection: f64,
    /// Absent when no prototype bank could be built.
    pub contrastive: Option<f64>,
    /// Combined objective; a missing contrastive term counts as 0.
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    /// `None` once the detection schedule is exhausted and the previous round is carried over.
    pub detection: Option<DetectionReport>,
    pub segmentation: Option<SegmentationReport>,
    pub prototypes_built: bool,
    pub prototype_error: Option<String>,
    pub losses: LossReport,
    pub pseudo_label_metrics: Option<MetricReport>,
    pub prediction_metrics: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub schema_version: u32,
    pub round: usize,
    pub config: PipelineConfig,
    pub images: Vec<ImageReport>,
    pub mean_pseudo_label_metrics: Option<MetricReport>,
}

#[derive(Serialize, Deserialize)]
struct DetState {
    round_index: usize,
    reference_count: Option<usize>,
}

fn round_dir(workdir: &Path, round: usize) -> PathBuf {
    workdir.join("rounds").join(round.to_string())
}

pub fn summary_path(workdir: &Path, round: usize) -> PathBuf {
    round_dir(workdir, round).join("summary.json")
}

pub fn output_dir(workdir: &Path, round: usize, id: &str) -> PathBuf {
    round_dir(workdir, round).join("outputs").join(id)
}

pub fn input_dir(workdir: &Path, round: usize, id: &str) -> PathBuf {
    round_dir(workdir, round).join("inputs").join(id)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

/// Image ids: the sub-directories of `images/`, sorted.
pub fn list_images(workdir: &Path) -> Result<Vec<String>> {
    let dir = workdir.join("images");
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
        let entry = entry.map_err(io_err(&dir))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// FNV-1a mix of the base seed, image id, round and a purpose salt.
fn derive_seed(base: u64, id: &str, round: usize, salt: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in id.bytes().chain(round.to_le_bytes()).chain(salt.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn load_source(workdir: &Path) -> Result<Option<(FeatureMap, LabelMap, ProbMap)>> {
    let dir = workdir.join("source");
    if !dir.is_dir() {
        return Ok(None);
    }
    Ok(Some((
        FeatureMap::load(dir.join("features.npy"))?,
        LabelMap::load(dir.join("labels.npy"))?,
        ProbMap::load(dir.join("prob.npy"))?,
    )))
}

fn mean_metrics(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    Some(MetricReport {
        dice: reports.iter().map(|m| m.dice).sum::<f64>() / n,
        aji: reports.iter().map(|m| m.aji).sum::<f64>() / n,
        pq: reports.iter().map(|m| m.pq).sum::<f64>() / n,
    })
}

/// Instances of a label map's foreground, with ignore pixels treated as background.
fn foreground_instances(labels: &LabelMap, config: &PipelineConfig) -> Result<InstanceMap> {
    let fg = LabelMap::new(labels.grid().map(|&v| (v == FOREGROUND) as u8))?;
    connected_components(&fg, config.connectivity)
}

fn metrics_against(pred: &InstanceMap, gt: &InstanceMap) -> Result<MetricReport> {
    Ok(MetricReport { dice: dice(&pred.to_mask(), &gt.to_mask())?, aji: aji(pred, gt)?, pq: pq(pred, gt)?.0 })
}

struct Context<'a> {
    config: &'a PipelineConfig,
    workdir: &'a Path,
    round: usize,
    source: Option<&'a (FeatureMap, LabelMap, ProbMap)>,
    iteration: u64,
}

fn process_image(ctx: &Context<'_>, id: &str) -> Result<ImageReport> {
    let config = ctx.config;
    let r = ctx.round;
    let image_dir = ctx.workdir.join("images").join(id);
    let inputs = input_dir(ctx.workdir, r, id);
    let out = output_dir(ctx.workdir, r, id);
    let prev = (r > 0).then(|| output_dir(ctx.workdir, r - 1, id));

    let gt = PointSet::load(image_dir.join("points.npy"))?;
    let p = ProbMap::load(inputs.join("prob.npy"))?;
    let density = DensityMap::load(inputs.join("density.npy"))?;
    let z = FeatureMap::load(inputs.join("features.npy"))?;
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;

    // detection schedule
    let det_params = config.detection_params()?;
    let (detection, det_target, det_mask) = if r < config.detection_rounds {
        let state = match &prev {
            None => DetectionRoundState::new(gt.clone(), det_params)?,
            Some(prev) => {
                let path = prev.join(outputs::DET_STATE);
                let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
                let saved: DetState =
                    serde_json::from_str(&text).map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))?;
                DetectionRoundState {
                    round_index: saved.round_index,
                    accepted_points: PointSet::load(prev.join(outputs::ACCEPTED_POINTS))?,
                    reference_count: saved.reference_count,
                    params: det_params,
                }
            }
        };
        let round = next_detection_round(&state, &density)?;
        round.state.accepted_points.store(out.join(outputs::ACCEPTED_POINTS))?;
        let saved = DetState { round_index: round.state.round_index, reference_count: round.state.reference_count };
        let state_path = out.join(outputs::DET_STATE);
        std::fs::write(&state_path, serde_json::to_string_pretty(&saved).expect("plain struct")).map_err(io_err(&state_path))?;
        let report = DetectionReport {
            estimated_count: round.estimated_count,
            added: round.added.len(),
            pseudo_points: round.state.pseudo_count(),
            total_points: round.state.accepted_points.len(),
        };
        (Some(report), round.target, round.loss_mask)
    } else {
        let prev = prev.as_ref().expect("detection schedule has at least one round");
        PointSet::load(prev.join(outputs::ACCEPTED_POINTS))?.store(out.join(outputs::ACCEPTED_POINTS))?;
        let text = std::fs::read(prev.join(outputs::DET_STATE)).map_err(|_| Error::MissingFile(prev.join(outputs::DET_STATE)))?;
        let state_path = out.join(outputs::DET_STATE);
        std::fs::write(&state_path, text).map_err(io_err(&state_path))?;
        (None, DensityMap::load(prev.join(outputs::DET_TARGET))?, LabelMap::load(prev.join(outputs::DET_MASK))?)
    };
    det_target.store(out.join(outputs::DET_TARGET))?;
    det_mask.store(out.join(outputs::DET_MASK))?;

    // segmentation schedule
    let (segmentation, pseudo_label) = if r < config.seg_round_fractions.len() {
        let state = SegRoundState::at_round(config.seg_params()?, r)?;
        let round = segmentation_round(&state, &p, &density, &gt)?;
        round.omega.store(out.join(outputs::OMEGA))?;
        let report = SegmentationReport {
            fraction: round.fraction,
            omega_points: round.omega.len(),
            candidates: round.candidates.count(),
            kept: round.kept.count(),
            conflicts: round.conflicts.len(),
        };
        (Some(report), round.pseudo_label)
    } else {
        let prev = prev.as_ref().expect("segmentation schedule has at least one round");
        PointSet::load(prev.join(outputs::OMEGA))?.store(out.join(outputs::OMEGA))?;
        (None, LabelMap::load(prev.join(outputs::PSEUDO_LABEL))?)
    };
    pseudo_label.store(out.join(outputs::PSEUDO_LABEL))?;

    // prototypes and contrast
    let source = ctx.source.map(|(f, l, p)| SourceView { features: f, labels: l, prob: p });
    let target = TargetView { features: &z, points: &gt, prob: &p, pseudo_label: &pseudo_label };
    let mut kmeans = config.kmeans_config();
    kmeans.seed = derive_seed(config.seed, id, r, 0);
    let bank = foreground_prototypes(source, target, config.delta_e).and_then(|fg| {
        let bg = background_prototypes(&z, &pseudo_label, &kmeans)?;
        Ok(PrototypeBank::new(fg, bg, ctx.iteration, config.prototype_refresh_period))
    });
    let (bank, prototype_error) = match bank {
        Ok(b) => (Some(b), None),
        Err(e @ (Error::NoForegroundEvidence | Error::InsufficientBackground { .. })) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let contrastive = match &bank {
        Some(bank) => {
            bank.store(out.join(outputs::PROTOTYPES))?;
            let qp = config.query_params();
            let queries = (0..2u8)
                .map(|c| sample_queries(&z, &pseudo_label, &p, c, &qp, derive_seed(config.seed, id, r, 1 + c as u64)))
                .collect::<Result<Vec<_>>>()?;
            Some(contrastive_loss(&queries, bank, config.tau)?)
        }
        None => None,
    };

    let seg_loss = cross_entropy_masked(&p, &pseudo_label)?;
    let det_loss = l2_masked(&density, &det_target, &det_mask)?;
    let total = total_objective(seg_loss, det_loss, contrastive.unwrap_or(0.0), &config.weights())?;

    let gt_path = image_dir.join("gt_instances.npy");
    let (pseudo_label_metrics, prediction_metrics) = if gt_path.exists() {
        let gt_inst = InstanceMap::load(&gt_path)?;
        let pl_inst = foreground_instances(&pseudo_label, config)?;
        let pred_inst = connected_components(&binarize(&p, config.binarize_threshold)?, config.connectivity)?;
        (Some(metrics_against(&pl_inst, &gt_inst)?), Some(metrics_against(&pred_inst, &gt_inst)?))
    } else {
        (None, None)
    };

    Ok(ImageReport {
        id: id.to_string(),
        detection,
        segmentation,
        prototypes_built: bank.is_some(),
        prototype_error,
        losses: LossReport { segmentation: seg_loss, detection: det_loss, contrastive, total },
        pseudo_label_metrics,
        prediction_metrics,
    })
}

/// Runs one round for every image and writes `rounds/<round>/summary.json`.
pub fn run_round(config: &PipelineConfig, workdir: &Path, round: usize, options: &RunOptions) -> Result<RoundSummary> {
    config.validate()?;
    if round >= config.total_rounds() {
        return Err(Error::RoundBudgetExhausted { round, max: config.total_rounds() });
    }
    if round > 0 && !summary_path(workdir, round - 1).exists() {
        return Err(Error::RoundOrder(format!("round {round} needs round {} to be completed first", round - 1)));
    }
    let ids = list_images(workdir)?;
    let source = load_source(workdir)?;
    let ctx = Context { config, workdir, round, source: source.as_ref(), iteration: options.iteration };

    let run = || ids.par_iter().map(|id| process_image(&ctx, id)).collect::<Result<Vec<_>>>();
    let images = match options.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let metrics: Vec<MetricReport> = images.iter().filter_map(|i| i.pseudo_label_metrics).collect();
    let summary = RoundSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        round,
        config: config.clone(),
        mean_pseudo_label_metrics: mean_metrics(&metrics),
        images,
    };
    let path = summary_path(workdir, round);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(summary)
}

/// Runs rounds `0..=last` (default: every round), skipping none.
pub fn run_pipeline(
    config: &PipelineConfig,
    workdir: &Path,
    last: Option<usize>,
    options: &RunOptions,
) -> Result<Vec<RoundSummary>> {
    let last = last.unwrap_or(config.total_rounds().saturating_sub(1));
    (0..=last).map(|r| run_round(config, workdir, r, options)).collect()
}

/// Lays out a synthetic scene as image `id`, reusing its prediction as the input of every round.
pub fn stage_scene(workdir: &Path, id: &str, scene: &crate::synth::Scene, rounds: usize) -> Result<()> {
    let image_dir = workdir.join("images").join(id);
    std::fs::create_dir_all(&image_dir).map_err(io_err(&image_dir))?;
    scene.weak_points.store(image_dir.join("points.npy"))?;
    scene.gt.store(image_dir.join("gt_instances.npy"))?;
    for r in 0..rounds {
        let dir = input_dir(workdir, r, id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        scene.p.store(dir.join("prob.npy"))?;
        scene.d_pred.store(dir.join("density.npy"))?;
        scene.z.store(dir.join("features.npy"))?;
    }
    Ok(())
}
