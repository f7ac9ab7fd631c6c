use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_same_shape, DensityMap, LabelMap, ProbMap, BACKGROUND, FOREGROUND, IGNORE};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Pixel-wise binary cross-entropy averaged over supervised pixels.
pub fn cross_entropy_masked(p: &ProbMap, y: &LabelMap) -> Result<f64> {
    check_same_shape("cross_entropy_masked", p.shape(), y.shape())?;
    let mut sum = 0f64;
    let mut n = 0usize;
    for (&pv, &yv) in p.grid().data().iter().zip(y.grid().data()) {
        let q = (pv as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        match yv {
            FOREGROUND => sum -= q.ln(),
            BACKGROUND => sum -= (1.0 - q).ln(),
            _ => continue,
        }
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean squared error over pixels whose mask is not `IGNORE`.
pub fn l2_masked(pred: &DensityMap, target: &DensityMap, mask: &LabelMap) -> Result<f64> {
    check_same_shape("l2_masked prediction/target", pred.shape(), target.shape())?;
    check_same_shape("l2_masked prediction/mask", pred.shape(), mask.shape())?;
    let mut sum = 0f64;
    let mut n = 0usize;
    for ((&a, &b), &m) in pred.grid().data().iter().zip(target.grid().data()).zip(mask.grid().data()) {
        if m == IGNORE {
            continue;
        }
        let d = a as f64 - b as f64;
        sum += d * d;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights { lambda1: 1e-2, lambda2: 5e-3 }
    }
}

impl ObjectiveWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = ObjectiveWeights { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite() && self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::param("objective weights must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn total_objective(l_seg: f64, l_det: f64, l_contra: f64, w: &ObjectiveWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [("segmentation", l_seg), ("detection", l_det), ("contrastive", l_contra)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
    }
    Ok(l_seg + w.lambda1 * l_det + w.lambda2 * l_contra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Grid;

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = LabelMap::new(Grid::new(2, 3, vec![0, 1, 255, 1, 0, 0]).unwrap()).unwrap();
        let p = ProbMap::new(Grid::new(2, 3, vec![0.0, 1.0, 0.3, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(cross_entropy_masked(&p, &y).unwrap() <= 1e-6);
    }

    #[test]
    fn half_probability_gives_ln2() {
        let y = LabelMap::new(Grid::new(2, 2, vec![0, 1, 1, 0]).unwrap()).unwrap();
        let p = ProbMap::filled(2, 2, 0.5).unwrap();
        assert!((cross_entropy_masked(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn fully_ignored_losses_are_zero() {
        let y = LabelMap::filled(3, 3, IGNORE).unwrap();
        assert_eq!(cross_entropy_masked(&ProbMap::filled(3, 3, 0.2).unwrap(), &y).unwrap(), 0.0);
        let a = DensityMap::zeros(3, 3).unwrap();
        let b = DensityMap::new(Grid::filled(3, 3, 1.0).unwrap()).unwrap();
        assert_eq!(l2_masked(&a, &b, &y).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_its_square() {
        let a = DensityMap::new(Grid::filled(10, 10, 0.3).unwrap()).unwrap();
        let b = DensityMap::new(Grid::filled(10, 10, 0.2).unwrap()).unwrap();
        let m = LabelMap::filled(10, 10, 1).unwrap();
        assert!((l2_masked(&a, &b, &m).unwrap() - 0.01).abs() < 1e-8);
        assert_eq!(l2_masked(&a, &a, &m).unwrap(), 0.0);
    }

    #[test]
    fn objective_combination() {
        let w = ObjectiveWeights::default();
        assert_eq!(total_objective(1.0, 0.0, 0.0, &w).unwrap(), 1.0);
        assert!((total_objective(0.5, 2.0, 4.0, &w).unwrap() - 0.54).abs() < 1e-12);
        assert_eq!(total_objective(0.7, 3.0, 9.0, &ObjectiveWeights::new(0.0, 0.0).unwrap()).unwrap(), 0.7);
        assert!(matches!(total_objective(f64::NAN, 0.0, 0.0, &w), Err(Error::NonFinite(_))));
        assert!(ObjectiveWeights::new(-1.0, 0.0).is_err());
    }
}
