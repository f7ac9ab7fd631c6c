//! Pipeline configuration, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{KMeansConfig, QueryParams};
use crate::density::{single_point_peak, CountBasis, DetectionParams};
use crate::error::{Error, Result};
use crate::ipl::SegParams;
use crate::metrics::ObjectiveWeights;
use crate::types::Connectivity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sigma: f64,
    pub binarize_threshold: f64,
    pub connectivity: Connectivity,
    pub beta_per_round: f64,
    pub max_total_fraction: f64,
    pub detection_rounds: usize,
    pub count_basis: CountBasis,
    pub seg_round_fractions: Vec<f64>,
    pub delta_e: f64,
    pub delta_h: f64,
    pub easy_budget: usize,
    pub hard_budget: usize,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Confident-background threshold on the previous density; `None` derives it from sigma.
    pub eps_bg: Option<f64>,
    pub fp_mass_threshold: f64,
    /// NMS radius; `None` uses `round(sigma)`.
    pub min_distance: Option<usize>,
    /// NMS peak floor; `None` uses a tenth of a single point's peak.
    pub min_value: Option<f64>,
    pub kmeans_k: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub prototype_refresh_period: u64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sigma: 11.0,
            binarize_threshold: 0.7,
            connectivity: Connectivity::Eight,
            beta_per_round: 0.20,
            max_total_fraction: 0.80,
            detection_rounds: 4,
            count_basis: CountBasis::EachRound,
            seg_round_fractions: vec![0.0, 0.50, 0.95],
            delta_e: 0.95,
            delta_h: 0.80,
            easy_budget: 512,
            hard_budget: 512,
            tau: 0.5,
            lambda1: 1e-2,
            lambda2: 5e-3,
            eps_bg: None,
            fp_mass_threshold: 0.2,
            min_distance: None,
            min_value: None,
            kmeans_k: 2,
            kmeans_max_iter: 50,
            kmeans_tol: 1e-6,
            prototype_refresh_period: 1000,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::param(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io { path: path.to_path_buf(), source: e },
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn detection_params(&self) -> Result<DetectionParams> {
        let base = DetectionParams::for_sigma(self.sigma)?;
        let peak = single_point_peak(self.sigma)?;
        Ok(DetectionParams {
            beta_per_round: self.beta_per_round,
            max_total_fraction: self.max_total_fraction,
            rounds: self.detection_rounds,
            min_distance: self.min_distance.unwrap_or(base.min_distance),
            min_value: self.min_value.unwrap_or(0.1 * peak),
            eps_bg: self.eps_bg.unwrap_or(base.eps_bg),
            count_basis: self.count_basis,
            ..base
        })
    }

    pub fn seg_params(&self) -> Result<SegParams> {
        let det = self.detection_params()?;
        Ok(SegParams {
            confident_fraction: self.seg_round_fractions.clone(),
            binarize_threshold: self.binarize_threshold,
            connectivity: self.connectivity,
            min_distance: det.min_distance,
            min_value: det.min_value,
            fp_mass_threshold: self.fp_mass_threshold,
        })
    }

    pub fn query_params(&self) -> QueryParams {
        QueryParams {
            delta_e: self.delta_e,
            delta_h: self.delta_h,
            easy_budget: self.easy_budget,
            hard_budget: self.hard_budget,
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig { k: self.kmeans_k, max_iter: self.kmeans_max_iter, tol: self.kmeans_tol, seed: self.seed }
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights { lambda1: self.lambda1, lambda2: self.lambda2 }
    }

    /// Number of rounds the pipeline runs: the longer of the two schedules.
    pub fn total_rounds(&self) -> usize {
        self.detection_rounds.max(self.seg_round_fractions.len())
    }

    pub fn validate(&self) -> Result<()> {
        self.detection_params()?.validate()?;
        self.seg_params()?.validate()?;
        self.weights().validate()?;
        if !(self.delta_h < self.delta_e) || !(0.0..=1.0).contains(&self.delta_e) || !(0.0..=1.0).contains(&self.delta_h) {
            return Err(Error::param("need 0 <= delta_h < delta_e <= 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param("tau must be positive"));
        }
        if self.kmeans_k == 0 || self.kmeans_max_iter == 0 || !(self.kmeans_tol >= 0.0) {
            return Err(Error::param("k-means needs k >= 1, max_iter >= 1 and tol >= 0"));
        }
        if self.prototype_refresh_period == 0 {
            return Err(Error::param("prototype_refresh_period must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_method() {
        let c = PipelineConfig::default();
        assert_eq!(c.sigma, 11.0);
        assert_eq!(c.binarize_threshold, 0.7);
        assert_eq!(c.delta_e, 0.95);
        assert_eq!(c.delta_h, 0.80);
        assert_eq!(c.tau, 0.5);
        assert_eq!(c.lambda1, 1e-2);
        assert_eq!(c.lambda2, 5e-3);
        assert_eq!(c.detection_rounds, 4);
        assert_eq!(c.seg_round_fractions, vec![0.0, 0.5, 0.95]);
        assert_eq!(c.total_rounds(), 4);
        c.validate().unwrap();
        assert_eq!(c.detection_params().unwrap(), DetectionParams::default());
        assert_eq!(c.seg_params().unwrap(), SegParams::default());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let c = PipelineConfig { eps_bg: Some(1e-5), min_distance: Some(7), seed: 42, count_basis: CountBasis::FirstRound, ..Default::default() };
        let back = PipelineConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"sigma": 11.0, "sigmaa": 3}"#).is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = PipelineConfig::from_json(r#"{"tau": 0.05}"#).unwrap();
        assert_eq!(c.tau, 0.05);
        assert_eq!(c.sigma, 11.0);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [r#"{"tau": 0}"#, r#"{"delta_h": 0.99}"#, r#"{"connectivity": 6}"#, r#"{"lambda1": -1}"#, r#"{"seg_round_fractions": [0.5]}"#] {
            assert!(PipelineConfig::from_json(bad).is_err(), "{bad}");
        }
    }
}
