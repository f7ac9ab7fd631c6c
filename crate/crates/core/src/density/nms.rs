use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::types::{DensityMap, Point, PointSet};

/// Strict local maxima of a density map.
///
/// A pixel is a peak when its value is at least `min_value` and strictly
/// greater than every other pixel within Chebyshev radius `min_distance`
/// (the window is clipped at the border). Plateaus therefore yield no peak.
/// Peaks are sorted by descending value, equal values in row-major order,
/// and truncated to `max_peaks`. Each point's score is its density value.
pub fn nms_peaks(d: &DensityMap, min_distance: usize, max_peaks: usize, min_value: f64) -> Result<PointSet> {
    if min_distance == 0 {
        return Err(Error::param("min_distance must be at least 1"));
    }
    let grid = d.grid();
    let (h, w) = grid.shape();
    let data = grid.data();
    let mut peaks: Vec<(usize, f32)> = Vec::new();

    for r in 0..h {
        for c in 0..w {
            let v = data[r * w + c];
            if (v as f64) < min_value || !dominates(data, (h, w), r, c, 1) {
                continue;
            }
            if min_distance == 1 || dominates(data, (h, w), r, c, min_distance) {
                peaks.push((r * w + c, v));
            }
        }
    }

    peaks.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    peaks.truncate(max_peaks);
    PointSet::new(peaks.into_iter().map(|(i, v)| Point::pseudo(i / w, i % w, v)).collect())
}

fn dominates(data: &[f32], (h, w): (usize, usize), r: usize, c: usize, radius: usize) -> bool {
    let v = data[r * w + c];
    let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
    let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(w - 1));
    for rr in r0..=r1 {
        let row = &data[rr * w..rr * w + w];
        for (cc, &other) in row.iter().enumerate().take(c1 + 1).skip(c0) {
            if (rr != r || cc != c) && other >= v {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::gaussian::build_density_map;
    use crate::types::Grid;

    /// Exhaustive scan: every pixel against every other pixel of its window.
    fn oracle(d: &DensityMap, radius: usize, min_value: f64) -> Vec<(usize, usize, f32)> {
        let (h, w) = d.shape();
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let v = d.grid().get(r, c);
                if (v as f64) < min_value {
                    continue;
                }
                let mut strict = true;
                for rr in 0..h {
                    for cc in 0..w {
                        let near = rr.abs_diff(r) <= radius && cc.abs_diff(c) <= radius;
                        if near && (rr, cc) != (r, c) && d.grid().get(rr, cc) >= v {
                            strict = false;
                        }
                    }
                }
                if strict {
                    out.push((r, c, v));
                }
            }
        }
        out.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
        out
    }

    fn triples(p: &PointSet) -> Vec<(usize, usize, f32)> {
        p.iter().map(|p| (p.row, p.col, p.score)).collect()
    }

    #[test]
    fn two_gaussians() {
        let pts = PointSet::new(vec![Point::ground_truth(20, 20), Point::ground_truth(60, 60)]).unwrap();
        let d = build_density_map(&pts, (80, 80), 5.0).unwrap();
        let peaks = nms_peaks(&d, 5, usize::MAX, 0.0).unwrap();
        let got: Vec<_> = peaks.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(got.len(), 2);
        assert!(got.contains(&(20, 20)) && got.contains(&(60, 60)));
        assert!(peaks.points()[0].score >= peaks.points()[1].score);
        assert_eq!(triples(&peaks), oracle(&d, 5, 0.0));
    }

    #[test]
    fn constant_map_has_no_peaks() {
        let d = DensityMap::new(Grid::filled(10, 10, 0.3).unwrap()).unwrap();
        assert!(nms_peaks(&d, 2, 10, 0.0).unwrap().is_empty());
    }

    #[test]
    fn single_gaussian() {
        let pts = PointSet::new(vec![Point::ground_truth(30, 40)]).unwrap();
        let d = build_density_map(&pts, (64, 64), 11.0).unwrap();
        let peaks = nms_peaks(&d, 11, 10, 0.0).unwrap();
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks.points()[0].row, peaks.points()[0].col), (30, 40));
    }

    #[test]
    fn min_value_and_truncation() {
        let mut data = vec![0f32; 100];
        data[11] = 3.0;
        data[55] = 2.0;
        data[88] = 1.0;
        let d = DensityMap::new(Grid::new(10, 10, data).unwrap()).unwrap();
        let all = nms_peaks(&d, 1, 10, 0.0).unwrap();
        assert_eq!(triples(&all), vec![(1, 1, 3.0), (5, 5, 2.0), (8, 8, 1.0)]);
        assert_eq!(nms_peaks(&d, 1, 2, 0.0).unwrap().len(), 2);
        assert_eq!(nms_peaks(&d, 1, 10, 1.5).unwrap().len(), 2);
        // radius 4 lets (5,5) suppress nothing but (1,1) sees no rival either
        assert_eq!(triples(&nms_peaks(&d, 4, 10, 0.0).unwrap()), oracle(&d, 4, 0.0));
        assert!(nms_peaks(&d, 0, 10, 0.0).is_err());
    }

    #[test]
    fn equal_scores_sort_row_major() {
        let mut data = vec![0f32; 100];
        data[77] = 1.0;
        data[22] = 1.0;
        let d = DensityMap::new(Grid::new(10, 10, data).unwrap()).unwrap();
        let got: Vec<_> = nms_peaks(&d, 2, 10, 0.0).unwrap().iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(got, vec![(2, 2), (7, 7)]);
    }

    #[test]
    fn random_maps_match_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let h = rng.random_range(1..24);
            let w = rng.random_range(1..24);
            // coarse quantization produces plenty of ties
            let grid = Grid::from_fn(h, w, |_, _| rng.random_range(0..6) as f32).unwrap();
            let d = DensityMap::new(grid).unwrap();
            let radius = rng.random_range(1..5);
            let got = nms_peaks(&d, radius, usize::MAX, 1.0).unwrap();
            assert_eq!(triples(&got), oracle(&d, radius, 1.0));
        }
    }
}
