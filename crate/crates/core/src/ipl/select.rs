use crate::density::{estimate_count, nms_peaks};
use crate::density::rounds::quota_ceil;
use crate::error::{Error, Result};
use crate::types::{
    check_same_shape, DensityMap, Grid, InstanceMap, LabelMap, Point, PointSet, ProbMap, BACKGROUND,
    FOREGROUND, IGNORE,
};

/// Foreground where `p >= threshold`.
pub fn binarize(p: &ProbMap, threshold: f64) -> Result<LabelMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!("binarize threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(LabelMap::from_grid_unchecked(
        p.grid().map(|&v| if v as f64 >= threshold { FOREGROUND } else { BACKGROUND }),
    ))
}

/// Background where the prediction is at least as confident about background
/// as `threshold` demands of foreground (`p <= 1 - threshold`); 255 elsewhere.
pub fn confident_background(p: &ProbMap, threshold: f64) -> Result<LabelMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let cut = 1.0 - threshold;
    Ok(LabelMap::from_grid_unchecked(
        p.grid().map(|&v| if v as f64 <= cut { BACKGROUND } else { IGNORE }),
    ))
}

/// Union of every instance that contains at least one point of `omega`.
pub fn ipl_select(inst: &InstanceMap, omega: &PointSet) -> Result<LabelMap> {
    omega.check_bounds(inst.shape())?;
    let mut keep = vec![false; inst.count() as usize + 1];
    for p in omega {
        keep[inst.grid().get(p.row, p.col) as usize] = true;
    }
    keep[0] = false;
    Ok(LabelMap::from_grid_unchecked(
        inst.grid().map(|&id| if keep[id as usize] { FOREGROUND } else { BACKGROUND }),
    ))
}

/// Confident centers: the ground truth plus the strongest `ceil(fraction * N)`
/// density peaks, minus peaks closer than `min_distance` (Chebyshev) to a
/// ground-truth point. `N` is the count estimated from the density.
pub fn select_confident_centers(
    pred_density: &DensityMap,
    gt: &PointSet,
    fraction: f64,
    min_distance: usize,
    min_value: f64,
) -> Result<PointSet> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::param(format!("fraction must lie in [0, 1], got {fraction}")));
    }
    gt.check_bounds(pred_density.shape())?;
    let mut omega = gt.points().to_vec();
    let quota = quota_ceil(fraction * estimate_count(pred_density) as f64);
    if quota > 0 {
        let peaks = nms_peaks(pred_density, min_distance, quota, min_value)?;
        omega.extend(
            peaks
                .iter()
                .filter(|p| gt.iter().all(|g| g.chebyshev(p) >= min_distance))
                .copied(),
        );
    }
    PointSet::new(omega)
}

/// Drops instances whose integrated density is below `mass_threshold` and
/// relabels survivors `1..=K'` in their original order.
pub fn filter_false_positives(
    inst: &InstanceMap,
    pred_density: &DensityMap,
    mass_threshold: f64,
) -> Result<InstanceMap> {
    check_same_shape("filter_false_positives", inst.shape(), pred_density.shape())?;
    let k = inst.count() as usize;
    let mut mass = vec![0f64; k + 1];
    for (&id, &d) in inst.grid().data().iter().zip(pred_density.grid().data()) {
        mass[id as usize] += d as f64;
    }
    let mut remap = vec![0u32; k + 1];
    let mut next = 0;
    for id in 1..=k {
        if mass[id] >= mass_threshold {
            next += 1;
            remap[id] = next;
        }
    }
    let (h, w) = inst.shape();
    let grid = Grid::from_parts_unchecked(h, w, inst.grid().data().iter().map(|&id| remap[id as usize]).collect());
    Ok(InstanceMap::from_grid_unchecked(grid, next))
}

/// Fused target label map together with any ground-truth points that the
/// background mask contradicted.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub labels: LabelMap,
    pub conflicts: Vec<Point>,
}

/// Combines selected pseudo-label instances, ground-truth points and confident
/// background with priority gt > selected > background > ignore.
pub fn fuse_pseudolabel(selected: &LabelMap, gt: &PointSet, confident_bg: &LabelMap) -> Result<Fusion> {
    check_same_shape("fuse_pseudolabel", selected.shape(), confident_bg.shape())?;
    if !selected.is_binary() {
        return Err(Error::invariant("selected pseudo-label mask must be binary"));
    }
    gt.check_bounds(selected.shape())?;
    let (h, w) = selected.shape();
    let mut out: Vec<u8> = selected
        .grid()
        .data()
        .iter()
        .zip(confident_bg.grid().data())
        .map(|(&s, &bg)| {
            if s == FOREGROUND {
                FOREGROUND
            } else if bg == BACKGROUND {
                BACKGROUND
            } else {
                IGNORE
            }
        })
        .collect();
    let mut conflicts = Vec::new();
    for p in gt {
        let i = p.row * w + p.col;
        if confident_bg.grid().data()[i] == BACKGROUND {
            conflicts.push(*p);
        }
        out[i] = FOREGROUND;
    }
    Ok(Fusion {
        labels: LabelMap::from_grid_unchecked(Grid::from_parts_unchecked(h, w, out)),
        conflicts,
    })
}
