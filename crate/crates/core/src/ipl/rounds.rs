//! Three-round instance-aware segmentation pseudo-labelling.

use serde::{Deserialize, Serialize};

use crate::density::DetectionParams;
use crate::error::{Error, Result};
use crate::ipl::components::connected_components;
use crate::ipl::select::{
    binarize, confident_background, filter_false_positives, fuse_pseudolabel, ipl_select,
    select_confident_centers,
};
use crate::types::{check_same_shape, Connectivity, DensityMap, InstanceMap, LabelMap, Point, PointSet, ProbMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegParams {
    /// Share of estimated instances promoted to confident centers, per round.
    pub confident_fraction: Vec<f64>,
    pub binarize_threshold: f64,
    pub connectivity: Connectivity,
    pub min_distance: usize,
    pub min_value: f64,
    pub fp_mass_threshold: f64,
}

impl SegParams {
    pub fn validate(&self) -> Result<()> {
        let fr = &self.confident_fraction;
        if fr.is_empty() {
            return Err(Error::param("at least one segmentation round is required"));
        }
        if fr[0] != 0.0 {
            return Err(Error::param("round 0 must use ground-truth points only (fraction 0)"));
        }
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || fr.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::param("confident fractions must be non-decreasing within [0, 1]"));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::param("binarize_threshold must lie in (0, 1)"));
        }
        if self.min_distance == 0 {
            return Err(Error::param("min_distance must be at least 1"));
        }
        if !(self.fp_mass_threshold >= 0.0) {
            return Err(Error::param("fp_mass_threshold must be non-negative"));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.confident_fraction.len()
    }
}

impl Default for SegParams {
    fn default() -> Self {
        let det = DetectionParams::default();
        SegParams {
            confident_fraction: vec![0.0, 0.50, 0.95],
            binarize_threshold: 0.7,
            connectivity: Connectivity::Eight,
            min_distance: det.min_distance,
            min_value: det.min_value,
            fp_mass_threshold: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegRoundState {
    pub round_index: usize,
    pub params: SegParams,
}

impl SegRoundState {
    pub fn new(params: SegParams) -> Result<Self> {
        params.validate()?;
        Ok(SegRoundState { round_index: 0, params })
    }

    pub fn at_round(params: SegParams, round_index: usize) -> Result<Self> {
        params.validate()?;
        Ok(SegRoundState { round_index, params })
    }

    pub fn fraction(&self) -> Option<f64> {
        self.params.confident_fraction.get(self.round_index).copied()
    }
}

/// Everything a segmentation round produced, for inspection and file export.
#[derive(Clone, Debug)]
pub struct SegRound {
    pub state: SegRoundState,
    pub fraction: f64,
    pub omega: PointSet,
    pub candidates: InstanceMap,
    pub kept: InstanceMap,
    pub pseudo_label: LabelMap,
    pub conflicts: Vec<Point>,
}

/// binarize -> label -> confident centers -> instance selection ->
/// false-positive filter -> fusion with ground truth and confident background.
pub fn segmentation_round(
    state: &SegRoundState,
    p: &ProbMap,
    pred_density: &DensityMap,
    gt: &PointSet,
) -> Result<SegRound> {
    let params = &state.params;
    let fraction = state.fraction().ok_or(Error::RoundBudgetExhausted {
        round: state.round_index,
        max: params.rounds(),
    })?;
    check_same_shape("segmentation_round", p.shape(), pred_density.shape())?;

    let mask = binarize(p, params.binarize_threshold)?;
    let candidates = connected_components(&mask, params.connectivity)?;
    let omega = select_confident_centers(pred_density, gt, fraction, params.min_distance, params.min_value)?;
    let selected = ipl_select(&candidates, &omega)?;
    let selected_instances = connected_components(&selected, params.connectivity)?;
    let kept = filter_false_positives(&selected_instances, pred_density, params.fp_mass_threshold)?;
    let background = confident_background(p, params.binarize_threshold)?;
    let fusion = fuse_pseudolabel(&kept.to_mask(), gt, &background)?;

    Ok(SegRound {
        state: SegRoundState { round_index: state.round_index + 1, params: params.clone() },
        fraction,
        omega,
        candidates,
        kept,
        pseudo_label: fusion.labels,
        conflicts: fusion.conflicts,
    })
}
