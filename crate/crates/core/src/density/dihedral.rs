//! The eight symmetries of the pixel grid, used for test-time augmentation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DensityMap, Grid, Point, PointSet};

/// Grid symmetry. Rotations follow `numpy.rot90` (counter-clockwise).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::HFlip,
        Dihedral::VFlip,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    pub fn inverse(self) -> Dihedral {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    fn swaps_axes(self) -> bool {
        matches!(
            self,
            Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::Transpose | Dihedral::AntiTranspose
        )
    }

    pub fn output_shape(self, (h, w): (usize, usize)) -> (usize, usize) {
        if self.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Where input pixel `(row, col)` of an `h x w` grid lands.
    pub fn map_point(self, (row, col): (usize, usize), (h, w): (usize, usize)) -> (usize, usize) {
        match self {
            Dihedral::Identity => (row, col),
            Dihedral::Rot90 => (w - 1 - col, row),
            Dihedral::Rot180 => (h - 1 - row, w - 1 - col),
            Dihedral::Rot270 => (col, h - 1 - row),
            Dihedral::HFlip => (row, w - 1 - col),
            Dihedral::VFlip => (h - 1 - row, col),
            Dihedral::Transpose => (col, row),
            Dihedral::AntiTranspose => (w - 1 - col, h - 1 - row),
        }
    }

    pub fn apply_grid<T: Copy + Default>(self, grid: &Grid<T>) -> Grid<T> {
        let shape = grid.shape();
        let (oh, ow) = self.output_shape(shape);
        let mut out = vec![T::default(); oh * ow];
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let (nr, nc) = self.map_point((r, c), shape);
                out[nr * ow + nc] = grid.get(r, c);
            }
        }
        Grid::from_parts_unchecked(oh, ow, out)
    }

    pub fn apply_density(self, d: &DensityMap) -> DensityMap {
        DensityMap::new(self.apply_grid(d.grid())).expect("permutation preserves density invariants")
    }

    /// Transforms point coordinates of a map with the given (pre-transform) shape.
    pub fn apply_points(self, points: &PointSet, shape: (usize, usize)) -> Result<PointSet> {
        points.check_bounds(shape)?;
        let moved = points
            .iter()
            .map(|p| {
                let (row, col) = self.map_point((p.row, p.col), shape);
                Point { row, col, ..*p }
            })
            .collect();
        PointSet::new(moved)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dihedral::Identity => "identity",
            Dihedral::Rot90 => "rot90",
            Dihedral::Rot180 => "rot180",
            Dihedral::Rot270 => "rot270",
            Dihedral::HFlip => "hflip",
            Dihedral::VFlip => "vflip",
            Dihedral::Transpose => "transpose",
            Dihedral::AntiTranspose => "antitranspose",
        }
    }
}

impl fmt::Display for Dihedral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Dihedral {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dihedral::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::param(format!("unknown transform tag '{s}'")))
    }
}

/// Averages predictions made on transformed inputs after undoing each transform.
///
/// `maps[i]` is the prediction for the input transformed by `transforms[i]`.
pub fn tta_ensemble(maps: &[DensityMap], transforms: &[Dihedral]) -> Result<DensityMap> {
    if maps.len() != transforms.len() {
        return Err(Error::shape(format!(
            "{} maps but {} transform tags",
            maps.len(),
            transforms.len()
        )));
    }
    if maps.is_empty() {
        return Err(Error::param("tta_ensemble needs at least one map"));
    }
    let restored: Vec<DensityMap> = maps
        .iter()
        .zip(transforms)
        .map(|(m, t)| t.inverse().apply_density(m))
        .collect();
    let shape = restored[0].shape();
    if let Some((i, m)) = restored.iter().enumerate().find(|(_, m)| m.shape() != shape) {
        return Err(Error::shape(format!(
            "map {i} is {}x{} after inverse {}, expected {}x{}",
            m.shape().0,
            m.shape().1,
            transforms[i].inverse(),
            shape.0,
            shape.1
        )));
    }
    let n = restored.len() as f64;
    let mut acc = vec![0f64; shape.0 * shape.1];
    for m in &restored {
        for (a, &v) in acc.iter_mut().zip(m.grid().data()) {
            *a += v as f64;
        }
    }
    let data = acc.into_iter().map(|v| (v / n) as f32).collect();
    DensityMap::new(Grid::new(shape.0, shape.1, data)?)
}
