//! Iterative detection pseudo-labelling.
//!
//! Each round estimates the instance count from the predicted density, adds a
//! `beta` share of that count as new pseudo centers taken from the strongest
//! NMS peaks, and rebuilds the regression target over ground truth plus every
//! accepted pseudo center.

use serde::{Deserialize, Serialize};

use crate::density::gaussian::{build_density_map, estimate_count, single_point_peak};
use crate::density::nms::nms_peaks;
use crate::error::{Error, Result};
use crate::types::{DensityMap, LabelMap, Point, PointSet, Provenance, BACKGROUND, FOREGROUND, IGNORE};

/// Which estimated count the per-round quota is taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountBasis {
    /// Re-estimate the count from each round's prediction.
    #[default]
    EachRound,
    /// Keep the count estimated in round 0.
    FirstRound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    pub sigma: f64,
    pub beta_per_round: f64,
    pub max_total_fraction: f64,
    pub rounds: usize,
    pub min_distance: usize,
    pub min_value: f64,
    pub eps_bg: f64,
    pub count_basis: CountBasis,
}

impl DetectionParams {
    /// Defaults for a kernel bandwidth: NMS radius `sigma`, peak floor at 10% and
    /// background threshold at 0.1% of a single point's peak.
    pub fn for_sigma(sigma: f64) -> Result<Self> {
        let peak = single_point_peak(sigma)?;
        Ok(DetectionParams {
            sigma,
            beta_per_round: 0.20,
            max_total_fraction: 0.80,
            rounds: 4,
            min_distance: (sigma.round() as usize).max(1),
            min_value: 0.1 * peak,
            eps_bg: 1e-3 * peak,
            count_basis: CountBasis::EachRound,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.beta_per_round) || !frac(self.max_total_fraction) {
            return Err(Error::param("beta_per_round and max_total_fraction must lie in [0, 1]"));
        }
        if self.min_distance == 0 {
            return Err(Error::param("min_distance must be at least 1"));
        }
        if !(self.eps_bg >= 0.0) {
            return Err(Error::param("eps_bg must be non-negative"));
        }
        single_point_peak(self.sigma).map(|_| ())
    }
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams::for_sigma(11.0).expect("sigma 11 is valid")
    }
}

/// Floor that tolerates representation error, e.g. `0.2 * 20`.
pub(crate) fn quota_floor(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

pub(crate) fn quota_ceil(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRoundState {
    pub round_index: usize,
    pub accepted_points: PointSet,
    /// Count estimated in round 0; used under [`CountBasis::FirstRound`].
    pub reference_count: Option<usize>,
    pub params: DetectionParams,
}

impl DetectionRoundState {
    pub fn new(ground_truth: PointSet, params: DetectionParams) -> Result<Self> {
        params.validate()?;
        if ground_truth.iter().any(|p| p.provenance != Provenance::GroundTruth) {
            return Err(Error::invariant("initial detection state must hold ground-truth points only"));
        }
        Ok(DetectionRoundState {
            round_index: 0,
            accepted_points: ground_truth,
            reference_count: None,
            params,
        })
    }

    pub fn pseudo_count(&self) -> usize {
        self.accepted_points.count_of(Provenance::Pseudo)
    }
}

#[derive(Clone, Debug)]
pub struct DetectionRound {
    pub state: DetectionRoundState,
    pub target: DensityMap,
    /// 1 on the positive support of the target, 0 on confident background, 255 elsewhere.
    pub loss_mask: LabelMap,
    pub estimated_count: usize,
    pub added: Vec<Point>,
}

/// Advances the detection schedule by one round.
pub fn next_detection_round(state: &DetectionRoundState, pred: &DensityMap) -> Result<DetectionRound> {
    let params = &state.params;
    if state.round_index >= params.rounds {
        return Err(Error::RoundBudgetExhausted { round: state.round_index, max: params.rounds });
    }
    let shape = pred.shape();
    state.accepted_points.check_bounds(shape)?;

    let estimated = estimate_count(pred);
    let basis = match (params.count_basis, state.reference_count) {
        (CountBasis::FirstRound, Some(n)) => n,
        _ => estimated,
    };
    let per_round = quota_floor(params.beta_per_round * basis as f64);
    let total_cap = quota_floor(params.max_total_fraction * basis as f64);
    let quota = per_round.min(total_cap.saturating_sub(state.pseudo_count()));

    let mut accepted = state.accepted_points.points().to_vec();
    let mut added = Vec::with_capacity(quota);
    if quota > 0 {
        let candidates = nms_peaks(pred, params.min_distance, usize::MAX, params.min_value)?;
        for cand in candidates.iter() {
            if added.len() == quota {
                break;
            }
            if accepted.iter().all(|a| a.chebyshev(cand) >= params.min_distance) {
                accepted.push(*cand);
                added.push(*cand);
            }
        }
    }

    let accepted_points = PointSet::new(accepted)?;
    let target = build_density_map(&accepted_points, shape, params.sigma)?;
    let mask = target
        .grid()
        .data()
        .iter()
        .zip(pred.grid().data())
        .map(|(&t, &p)| {
            if t > 0.0 {
                FOREGROUND
            } else if (p as f64) <= params.eps_bg {
                BACKGROUND
            } else {
                IGNORE
            }
        })
        .collect();
    let loss_mask = LabelMap::new(crate::types::Grid::new(shape.0, shape.1, mask)?)?;

    Ok(DetectionRound {
        state: DetectionRoundState {
            round_index: state.round_index + 1,
            accepted_points,
            reference_count: state.reference_count.or(Some(estimated)),
            params: params.clone(),
        },
        target,
        loss_mask,
        estimated_count: estimated,
        added,
    })
}
