//! Grid and point types shared by every stage.
//!
//! All grids are row-major with `(row, col)` coordinates and the origin at the
//! top-left pixel. Constructors validate their invariants; once built, values
//! are never mutated in place by the library.

use std::collections::{HashSet, VecDeque};
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 1;
pub const IGNORE: u8 = 255;

/// Dense `height x width` grid stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invariant(format!(
                "grid dimensions must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Grid::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[self.offset(row, col)]
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Grid { height, width, data }
    }
}

impl<T: Copy> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (row, col): (usize, usize)) -> &T {
        &self.data[row * self.width + col]
    }
}

pub(crate) fn check_same_shape(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Pixel adjacency used for connected regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn neighbors(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::param(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Per-pixel foreground probability, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Grid<f32>);

impl ProbMap {
    pub fn new(grid: Grid<f32>) -> Result<Self> {
        if let Some((i, v)) = grid.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            let (r, c) = (i / grid.width(), i % grid.width());
            return Err(Error::invariant(format!(
                "probability {v} at ({r}, {c}) is outside [0, 1]"
            )));
        }
        Ok(ProbMap(grid))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        ProbMap::new(Grid::filled(height, width, value)?)
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// Non-negative density whose total mass encodes an instance count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap(Grid<f32>);

impl DensityMap {
    pub fn new(grid: Grid<f32>) -> Result<Self> {
        if let Some((i, v)) = grid
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            let (r, c) = (i / grid.width(), i % grid.width());
            return Err(Error::invariant(format!(
                "density {v} at ({r}, {c}) must be finite and non-negative"
            )));
        }
        Ok(DensityMap(grid))
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        DensityMap::new(Grid::filled(height, width, 0.0)?)
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Sum of all values, accumulated in f64.
    pub fn mass(&self) -> f64 {
        self.0.data().iter().map(|&v| v as f64).sum()
    }
}

/// Supervision grid over {0 = background, 1 = foreground, 255 = ignore}.
///
/// Binary masks are label maps restricted to {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap(Grid<u8>);

impl LabelMap {
    pub fn new(grid: Grid<u8>) -> Result<Self> {
        if let Some((i, v)) = grid
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !matches!(**v, BACKGROUND | FOREGROUND | IGNORE))
        {
            let (r, c) = (i / grid.width(), i % grid.width());
            return Err(Error::invariant(format!("invalid label value {v} at ({r}, {c})")));
        }
        Ok(LabelMap(grid))
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        LabelMap::new(Grid::filled(height, width, value)?)
    }

    pub(crate) fn from_grid_unchecked(grid: Grid<u8>) -> Self {
        debug_assert!(grid.data().iter().all(|v| matches!(*v, BACKGROUND | FOREGROUND | IGNORE)));
        LabelMap(grid)
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn is_binary(&self) -> bool {
        self.0.data().iter().all(|&v| v != IGNORE)
    }

    pub fn count(&self, value: u8) -> usize {
        self.0.data().iter().filter(|&&v| v == value).count()
    }
}

/// Per-pixel instance ids; 0 is background, ids run contiguously over `1..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMap {
    grid: Grid<u32>,
    count: u32,
}

impl InstanceMap {
    /// Validates id contiguity and that each id forms one 8-connected region.
    pub fn new(grid: Grid<u32>) -> Result<Self> {
        InstanceMap::with_connectivity(grid, Connectivity::Eight)
    }

    pub fn with_connectivity(grid: Grid<u32>, connectivity: Connectivity) -> Result<Self> {
        let count = grid.data().iter().copied().max().unwrap_or(0);
        let mut sizes = vec![0usize; count as usize + 1];
        for &id in grid.data() {
            sizes[id as usize] += 1;
        }
        if let Some(missing) = (1..=count).find(|&id| sizes[id as usize] == 0) {
            return Err(Error::invariant(format!(
                "instance ids must be contiguous 1..={count}; id {missing} is absent"
            )));
        }
        // Each id must be reachable from its first pixel.
        let (h, w) = grid.shape();
        let mut seen = vec![false; grid.len()];
        let mut started = vec![false; count as usize + 1];
        let mut queue = VecDeque::new();
        for start in 0..grid.len() {
            let id = grid.data()[start];
            if id == 0 || seen[start] {
                continue;
            }
            if started[id as usize] {
                return Err(Error::invariant(format!(
                    "instance {id} is split into more than one connected region"
                )));
            }
            started[id as usize] = true;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                let (r, c) = ((i / w) as isize, (i % w) as isize);
                for &(dr, dc) in connectivity.neighbors() {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && grid.data()[j] == id {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        Ok(InstanceMap { grid, count })
    }

    pub(crate) fn from_grid_unchecked(grid: Grid<u32>, count: u32) -> Self {
        InstanceMap { grid, count }
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Ok(InstanceMap {
            grid: Grid::filled(height, width, 0)?,
            count: 0,
        })
    }

    pub fn grid(&self) -> &Grid<u32> {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.shape()
    }

    /// Number of instances `K`.
    pub fn count(&self) -> u32 {
        self.count
    }

    /// Pixel count of every instance, indexed by id (index 0 is background).
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.count as usize + 1];
        for &id in self.grid.data() {
            areas[id as usize] += 1;
        }
        areas
    }

    /// Foreground mask (`id > 0`).
    pub fn to_mask(&self) -> LabelMap {
        LabelMap::from_grid_unchecked(self.grid.map(|&id| if id > 0 { FOREGROUND } else { BACKGROUND }))
    }
}

/// Stacked `channels x height x width` feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invariant(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} feature map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invariant(format!("feature value {v} is not finite")));
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector at a flat pixel offset.
    pub fn vector_at(&self, pixel: usize) -> Vec<f32> {
        let plane = self.height * self.width;
        (0..self.channels).map(|ch| self.data[ch * plane + pixel]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

impl Provenance {
    pub fn code(self) -> f32 {
        match self {
            Provenance::GroundTruth => 0.0,
            Provenance::Pseudo => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    pub score: f32,
    pub provenance: Provenance,
}

impl Point {
    pub fn ground_truth(row: usize, col: usize) -> Self {
        Point { row, col, score: 1.0, provenance: Provenance::GroundTruth }
    }

    pub fn pseudo(row: usize, col: usize, score: f32) -> Self {
        Point { row, col, score, provenance: Provenance::Pseudo }
    }

    /// Chebyshev distance in pixels.
    pub fn chebyshev(&self, other: &Point) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }
}

/// Ordered list of instance centers; no two points share a pixel.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !p.score.is_finite() {
                return Err(Error::invariant(format!(
                    "point ({}, {}) has non-finite score",
                    p.row, p.col
                )));
            }
            if !seen.insert((p.row, p.col)) {
                return Err(Error::invariant(format!("duplicate point ({}, {})", p.row, p.col)));
            }
        }
        Ok(PointSet { points })
    }

    pub fn empty() -> Self {
        PointSet::default()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn count_of(&self, provenance: Provenance) -> usize {
        self.points.iter().filter(|p| p.provenance == provenance).count()
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        self.points.iter().any(|p| p.row == row && p.col == col)
    }

    /// Fails if any point lies outside a `height x width` grid.
    pub fn check_bounds(&self, (height, width): (usize, usize)) -> Result<()> {
        if let Some(p) = self.points.iter().find(|p| p.row >= height || p.col >= width) {
            return Err(Error::invariant(format!(
                "point ({}, {}) is outside the {height}x{width} grid",
                p.row, p.col
            )));
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a PointSet {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}
