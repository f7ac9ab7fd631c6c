use std::path::Path;
use std::process::{Command, Output};

use curate_core::density::{next_detection_round, DetectionRoundState};
use curate_core::ipl::{segmentation_round, SegRoundState};
use curate_core::metrics::{aji, dice, pq};
use curate_core::{DensityMap, InstanceMap, LabelMap, PipelineConfig, PointSet, ProbMap, Provenance, TensorFile};
use serde_json::Value;

fn curate(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curate")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Value {
    let out = curate(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn scene(cwd: &Path) {
    ok(&["synth", "--out", "s", "--seed", "5", "--height", "160", "--width", "160", "--instances", "12", "--prob-noise", "1"], cwd);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    scene(cwd);
    assert_eq!(curate(&["nms", "--density", "absent.npy", "--out", "x.npy"], cwd).status.code(), Some(3));
    assert_eq!(curate(&["seg-round", "--round", "7", "--prob", "s/prob.npy", "--density", "s/density.npy", "--points", "s/points.npy", "--out-dir", "o"], cwd).status.code(), Some(2));
    assert_eq!(curate(&["frobnicate"], cwd).status.code(), Some(2));
    std::fs::write(cwd.join("bad.json"), r#"{"sigma": -1}"#).unwrap();
    let out = curate(&["detect-round", "--round", "0", "--points", "s/points.npy", "--pred", "s/density.npy", "--out-dir", "o", "--config", "bad.json"], cwd);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(cwd.join("junk.npy"), b"not a tensor").unwrap();
    assert_eq!(curate(&["nms", "--density", "junk.npy", "--out", "x.npy"], cwd).status.code(), Some(2));
}

#[test]
fn detect_round_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    scene(cwd);
    let r0 = ok(&["detect-round", "--round", "0", "--points", "s/points.npy", "--pred", "s/density.npy", "--out-dir", "d0"], cwd);
    let added = r0["added"].as_u64().unwrap() as f64;
    assert!(added <= 0.2 * r0["estimated_count"].as_f64().unwrap());

    let gt = PointSet::load(cwd.join("s/points.npy")).unwrap();
    let pred = DensityMap::load(cwd.join("s/density.npy")).unwrap();
    let state = DetectionRoundState::new(gt.clone(), PipelineConfig::default().detection_params().unwrap()).unwrap();
    let lib = next_detection_round(&state, &pred).unwrap();
    assert_eq!(PointSet::load(cwd.join("d0/accepted_points.npy")).unwrap(), lib.state.accepted_points);
    assert_eq!(DensityMap::load(cwd.join("d0/det_target.npy")).unwrap(), lib.target);
    assert_eq!(LabelMap::load(cwd.join("d0/det_mask.npy")).unwrap(), lib.loss_mask);

    let r1 = ok(
        &["detect-round", "--round", "1", "--points", "s/points.npy", "--accepted", "d0/accepted_points.npy", "--pred", "s/density.npy", "--out-dir", "d1"],
        cwd,
    );
    let accepted = PointSet::load(cwd.join("d1/accepted_points.npy")).unwrap();
    assert_eq!(accepted.count_of(Provenance::GroundTruth), gt.len());
    assert_eq!(r1["pseudo_points"].as_u64().unwrap() as usize, accepted.count_of(Provenance::Pseudo));

    let out = curate(&["detect-round", "--round", "1", "--points", "s/points.npy", "--pred", "s/density.npy", "--out-dir", "d1"], cwd);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seg_round_final_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    scene(cwd);
    let r = ok(&["seg-round", "--round", "2", "--prob", "s/prob.npy", "--density", "s/density.npy", "--points", "s/points.npy", "--out-dir", "g"], cwd);
    assert_eq!(r["fraction"].as_f64(), Some(0.95));

    let p = ProbMap::load(cwd.join("s/prob.npy")).unwrap();
    let d = DensityMap::load(cwd.join("s/density.npy")).unwrap();
    let pts = PointSet::load(cwd.join("s/points.npy")).unwrap();
    let state = SegRoundState::at_round(PipelineConfig::default().seg_params().unwrap(), 2).unwrap();
    let lib = segmentation_round(&state, &p, &d, &pts).unwrap();
    assert_eq!(LabelMap::load(cwd.join("g/pseudo_label.npy")).unwrap(), lib.pseudo_label);
    assert_eq!(r["omega_points"].as_u64().unwrap() as usize, lib.omega.len());
}

#[test]
fn evaluate_reports_means_and_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    scene(cwd);
    ok(&["seg-round", "--round", "2", "--prob", "s/prob.npy", "--density", "s/density.npy", "--points", "s/points.npy", "--out-dir", "g"], cwd);
    let r = ok(&["evaluate", "--pred", "g/kept_instances.npy", "s/gt_instances.npy", "--gt", "s/gt_instances.npy", "s/gt_instances.npy"], cwd);
    for key in ["dice", "aji", "pq", "per_image"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    let images = r["per_image"].as_array().unwrap();
    assert_eq!(images.len(), 2);
    assert_eq!(images[1]["aji"].as_f64(), Some(1.0));

    let pred = InstanceMap::load(cwd.join("g/kept_instances.npy")).unwrap();
    let gt = InstanceMap::load(cwd.join("s/gt_instances.npy")).unwrap();
    assert_eq!(images[0]["aji"].as_f64(), Some(aji(&pred, &gt).unwrap()));
    assert_eq!(images[0]["pq"].as_f64(), Some(pq(&pred, &gt).unwrap().0));
    assert_eq!(images[0]["dice"].as_f64(), Some(dice(&pred.to_mask(), &gt.to_mask()).unwrap()));

    let out = curate(&["evaluate", "--pred", "g/kept_instances.npy", "--gt", "s/gt_instances.npy", "s/gt_instances.npy"], cwd);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prototypes_then_contrast_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    scene(cwd);
    ok(&["seg-round", "--round", "1", "--prob", "s/prob.npy", "--density", "s/density.npy", "--points", "s/points.npy", "--out-dir", "g"], cwd);
    let bank = ok(
        &["prototypes", "--features", "s/features.npy", "--prob", "s/prob.npy", "--points", "s/points.npy", "--pseudo-label", "g/pseudo_label.npy", "--out", "bank/p.npy"],
        cwd,
    );
    assert_eq!(bank["channels"].as_u64(), Some(8));
    assert!(cwd.join("bank/p.json").exists());
    let loss = ok(&["contrast-loss", "--bank", "bank/p.npy", "--features", "s/features.npy", "--labels", "g/pseudo_label.npy", "--prob", "s/prob.npy", "--seed", "1"], cwd);
    assert!(loss["loss"].as_f64().unwrap().is_finite());
    let again = ok(&["contrast-loss", "--bank", "bank/p.npy", "--features", "s/features.npy", "--labels", "g/pseudo_label.npy", "--prob", "s/prob.npy", "--seed", "1"], cwd);
    assert_eq!(loss, again);
}

#[test]
fn losses_combine_with_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    scene(cwd);
    ok(&["detect-round", "--round", "0", "--points", "s/points.npy", "--pred", "s/density.npy", "--out-dir", "d"], cwd);
    ok(&["seg-round", "--round", "0", "--prob", "s/prob.npy", "--density", "s/density.npy", "--points", "s/points.npy", "--out-dir", "g"], cwd);
    let r = ok(
        &["losses", "--prob", "s/prob.npy", "--labels", "g/pseudo_label.npy", "--pred-density", "s/density.npy", "--target-density", "d/det_target.npy", "--mask", "d/det_mask.npy", "--contrastive", "0.5"],
        cwd,
    );
    let f = |k: &str| r[k].as_f64().unwrap();
    let expected = f("segmentation") + 1e-2 * f("detection") + 5e-3 * 0.5;
    assert!((f("total") - expected).abs() < 1e-12);
}

#[test]
fn run_pipeline_over_staged_workdir() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let spec = curate_core::synth::SceneSpec { seed: 2, shape: (128, 128), n_instances: 6, ..Default::default() };
    let scene = curate_core::synth::generate_scene(&spec).unwrap();
    curate_core::pipeline::stage_scene(&cwd.join("w"), "a", &scene, 4).unwrap();
    let r0 = ok(&["--jobs", "2", "run-pipeline", "--workdir", "w", "--round", "0"], cwd);
    assert_eq!(r0["round"].as_u64(), Some(0));
    assert_eq!(curate(&["run-pipeline", "--workdir", "w", "--round", "2"], cwd).status.code(), Some(2));
    let last = ok(&["run-pipeline", "--workdir", "w"], cwd);
    assert_eq!(last["round"].as_u64(), Some(3));
    assert!(cwd.join("w/rounds/3/summary.json").exists());
}
