use crate::error::{Error, Result};
use crate::types::{DensityMap, Grid, LabelMap, PointSet, BACKGROUND, IGNORE};

/// Truncation radius of the kernel, in units of sigma.
pub const TRUNCATE_SIGMAS: f64 = 3.0;

/// Circular Gaussian footprint truncated at `3 * sigma`.
#[derive(Clone, Debug)]
pub struct GaussianKernel {
    sigma: f64,
    radius: isize,
    /// `(drow, dcol, weight)` with unnormalized weights.
    taps: Vec<(isize, isize, f64)>,
    full_mass: f64,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::param(format!("sigma must be positive, got {sigma}")));
        }
        let cutoff = TRUNCATE_SIGMAS * sigma;
        let radius = cutoff.ceil() as isize;
        let mut taps = Vec::new();
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let d2 = (dr * dr + dc * dc) as f64;
                if d2 <= cutoff * cutoff {
                    taps.push((dr, dc, (-d2 / (2.0 * sigma * sigma)).exp()));
                }
            }
        }
        let full_mass = taps.iter().map(|t| t.2).sum();
        Ok(GaussianKernel { sigma, radius, taps, full_mass })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius as usize
    }

    /// Center value of a single interior point's unit-mass footprint.
    pub fn peak(&self) -> f64 {
        1.0 / self.full_mass
    }

    /// Adds one unit of mass around `(row, col)`, renormalized over the
    /// in-bounds part of the footprint so border points keep unit mass.
    fn splat(&self, acc: &mut [f64], (h, w): (usize, usize), row: usize, col: usize, amplitude: f64) {
        let inside = |dr: isize, dc: isize| {
            let (r, c) = (row as isize + dr, col as isize + dc);
            (r >= 0 && c >= 0 && r < h as isize && c < w as isize).then(|| r as usize * w + c as usize)
        };
        let mass: f64 = self
            .taps
            .iter()
            .filter(|(dr, dc, _)| inside(*dr, *dc).is_some())
            .map(|t| t.2)
            .sum();
        for &(dr, dc, wt) in &self.taps {
            if let Some(i) = inside(dr, dc) {
                acc[i] += amplitude * wt / mass;
            }
        }
    }
}

/// Theoretical peak of a single interior point's density for `sigma`.
pub fn single_point_peak(sigma: f64) -> Result<f64> {
    Ok(GaussianKernel::new(sigma)?.peak())
}

/// Sums a truncated unit-mass Gaussian per point.
pub fn build_density_map(points: &PointSet, shape: (usize, usize), sigma: f64) -> Result<DensityMap> {
    let kernel = GaussianKernel::new(sigma)?;
    build_density_map_with(points, shape, &kernel)
}

pub fn build_density_map_with(
    points: &PointSet,
    (h, w): (usize, usize),
    kernel: &GaussianKernel,
) -> Result<DensityMap> {
    points.check_bounds((h, w))?;
    let mut acc = vec![0f64; h * w];
    for p in points {
        kernel.splat(&mut acc, (h, w), p.row, p.col, 1.0);
    }
    let data = acc.into_iter().map(|v| v as f32).collect();
    DensityMap::new(Grid::new(h, w, data)?)
}

/// Like [`build_density_map_with`] but each point carries `amplitudes[i]` units of mass.
pub fn build_weighted_density_map(
    points: &PointSet,
    amplitudes: &[f64],
    (h, w): (usize, usize),
    kernel: &GaussianKernel,
) -> Result<DensityMap> {
    points.check_bounds((h, w))?;
    if amplitudes.len() != points.len() {
        return Err(Error::shape(format!("{} amplitudes for {} points", amplitudes.len(), points.len())));
    }
    if amplitudes.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::param("amplitudes must be finite and non-negative"));
    }
    let mut acc = vec![0f64; h * w];
    for (p, &a) in points.iter().zip(amplitudes) {
        kernel.splat(&mut acc, (h, w), p.row, p.col, a);
    }
    let data = acc.into_iter().map(|v| v as f32).collect();
    DensityMap::new(Grid::new(h, w, data)?)
}

/// Instance count read off a density map: total mass rounded half-up, never negative.
pub fn estimate_count(d: &DensityMap) -> usize {
    (d.mass() + 0.5).floor().max(0.0) as usize
}

/// Confident background: 0 where `prev_pred <= eps_bg`, 255 elsewhere.
pub fn background_mask(prev_pred: &DensityMap, eps_bg: f64) -> Result<LabelMap> {
    if eps_bg.is_nan() || eps_bg < 0.0 {
        return Err(Error::param(format!("eps_bg must be non-negative, got {eps_bg}")));
    }
    let grid = prev_pred
        .grid()
        .map(|&v| if (v as f64) <= eps_bg { BACKGROUND } else { IGNORE });
    Ok(LabelMap::from_grid_unchecked(grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point;

    fn pts(coords: &[(usize, usize)]) -> PointSet {
        PointSet::new(coords.iter().map(|&(r, c)| Point::ground_truth(r, c)).collect()).unwrap()
    }

    #[test]
    fn single_interior_point_has_unit_mass() {
        let d = build_density_map(&pts(&[(128, 128)]), (256, 256), 11.0).unwrap();
        let m = d.mass();
        assert!((0.999..=1.001).contains(&m), "{m}");
    }

    #[test]
    fn empty_points_give_zero_map() {
        let d = build_density_map(&PointSet::empty(), (8, 8), 11.0).unwrap();
        assert!(d.grid().data().iter().all(|&v| v == 0.0));
        assert_eq!(estimate_count(&d), 0);
    }

    #[test]
    fn seven_points_mass_matches_direct_sum() {
        let coords = [(20, 20), (20, 90), (60, 150), (120, 40), (130, 200), (200, 100), (240, 240)];
        let d = build_density_map(&pts(&coords), (256, 256), 11.0).unwrap();
        // direct summation of each footprint separately
        let direct: f64 = coords
            .iter()
            .map(|&c| build_density_map(&pts(&[c]), (256, 256), 11.0).unwrap().mass())
            .sum();
        assert!((d.mass() - direct).abs() < 1e-4);
        assert!((6.99..=7.01).contains(&d.mass()));
        assert_eq!(estimate_count(&d), 7);
    }

    #[test]
    fn corner_point_keeps_unit_mass() {
        let d = build_density_map(&pts(&[(0, 0)]), (40, 40), 11.0).unwrap();
        assert!((d.mass() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn invalid_inputs() {
        assert!(build_density_map(&pts(&[(5, 5)]), (5, 5), 11.0).is_err());
        assert!(build_density_map(&pts(&[(1, 1)]), (5, 5), 0.0).is_err());
        assert!(build_density_map(&pts(&[(1, 1)]), (5, 5), -2.0).is_err());
    }

    #[test]
    fn half_mass_rounds_up() {
        let mut data = vec![0f32; 16];
        data[0] = 6.0;
        data[5] = 0.5;
        let d = DensityMap::new(Grid::new(4, 4, data).unwrap()).unwrap();
        assert_eq!(estimate_count(&d), 7);
        let d = DensityMap::new(Grid::new(1, 1, vec![6.49]).unwrap()).unwrap();
        assert_eq!(estimate_count(&d), 6);
    }

    #[test]
    fn peak_is_center_value() {
        let k = GaussianKernel::new(11.0).unwrap();
        let d = build_density_map(&pts(&[(50, 50)]), (101, 101), 11.0).unwrap();
        assert!((d.grid().get(50, 50) as f64 - k.peak()).abs() < 1e-9);
        // roughly the continuous 1 / (2 pi sigma^2)
        let continuous = 1.0 / (2.0 * std::f64::consts::PI * 121.0);
        assert!((k.peak() / continuous - 1.0).abs() < 0.02);
    }

    #[test]
    fn background_mask_thresholds() {
        let zeros = DensityMap::zeros(6, 6).unwrap();
        let m = background_mask(&zeros, 1e-4).unwrap();
        assert_eq!(m.count(BACKGROUND), 36);

        let d = build_density_map(&pts(&[(40, 40)]), (81, 81), 5.0).unwrap();
        let eps = 1e-3 * single_point_peak(5.0).unwrap();
        let m = background_mask(&d, eps).unwrap();
        assert_eq!(m.grid().get(40, 40), IGNORE);
        assert_eq!(m.grid().get(0, 0), BACKGROUND);
        // thresholding oracle
        for (i, &v) in d.grid().data().iter().enumerate() {
            let expect = if (v as f64) <= eps { BACKGROUND } else { IGNORE };
            assert_eq!(m.grid().data()[i], expect);
        }

        let all = background_mask(&d, 1e30).unwrap();
        assert_eq!(all.count(BACKGROUND), 81 * 81);
        assert!(background_mask(&d, -1.0).is_err());
    }
}
