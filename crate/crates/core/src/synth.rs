//! Seeded synthetic scenes: elliptical instances, a corrupted probability
//! map, a predicted density map and class-dependent features.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{build_weighted_density_map, GaussianKernel};
use crate::error::{Error, Result};
use crate::tensor_io::TensorFile;
use crate::types::{DensityMap, FeatureMap, Grid, InstanceMap, Point, PointSet, ProbMap};

/// Logit magnitude of a noiseless foreground or background pixel.
const BASE_LOGIT: f64 = 4.0;
/// Minimum pixel gap between neighbouring objects so they never touch.
const OBJECT_GAP: f64 = 3.0;
const PLACEMENT_TRIES: usize = 2000;
/// Height of the horizontal bands that alternate the two background modes.
const BACKGROUND_BAND: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub shape: (usize, usize),
    pub n_instances: usize,
    /// Inclusive range of ellipse semi-axes, in pixels.
    pub radius_range: (f64, f64),
    /// Std-dev of the Gaussian noise added to the probability logits.
    pub prob_noise: f64,
    pub fp_blobs: usize,
    pub fn_drop: f64,
    pub point_fraction: f64,
    pub point_jitter: f64,
    /// Object centers are at least twice this apart.
    pub min_distance: usize,
    pub sigma: f64,
    /// Relative std-dev of per-instance amplitude noise on the predicted density.
    pub density_noise: f64,
    pub feature_channels: usize,
    pub feature_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            shape: (256, 256),
            n_instances: 20,
            radius_range: (9.0, 13.0),
            prob_noise: 0.0,
            fp_blobs: 0,
            fn_drop: 0.0,
            point_fraction: 0.15,
            point_jitter: 0.0,
            min_distance: 15,
            sigma: 11.0,
            density_noise: 0.0,
            feature_channels: 8,
            feature_noise: 0.3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.shape;
        let (rmin, rmax) = self.radius_range;
        if h == 0 || w == 0 {
            return Err(Error::param("scene shape must be non-empty"));
        }
        if !(rmin >= 1.0 && rmin <= rmax && rmax.is_finite()) {
            return Err(Error::param("radius_range must satisfy 1 <= min <= max"));
        }
        if 2.0 * rmax + 2.0 >= h.min(w) as f64 {
            return Err(Error::param("instances do not fit in the scene"));
        }
        for (name, v) in [("fn_drop", self.fn_drop), ("point_fraction", self.point_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("prob_noise", self.prob_noise),
            ("point_jitter", self.point_jitter),
            ("density_noise", self.density_noise),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.min_distance == 0 || self.feature_channels == 0 {
            return Err(Error::param("min_distance and feature_channels must be positive"));
        }
        GaussianKernel::new(self.sigma)?;
        Ok(())
    }

    /// Number of instances that receive a weak point annotation.
    pub fn weak_point_count(&self) -> usize {
        (self.point_fraction * self.n_instances as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Ellipse {
    row: f64,
    col: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, r: usize, c: usize) -> bool {
        let (dr, dc) = (r as f64 - self.row, c as f64 - self.col);
        let (s, k) = self.theta.sin_cos();
        let u = dc * k + dr * s;
        let v = -dc * s + dr * k;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn reach(&self) -> f64 {
        self.a.max(self.b)
    }

    fn pixels(&self, (h, w): (usize, usize)) -> Vec<(usize, usize)> {
        let m = self.reach().ceil() as isize + 1;
        let (r0, c0) = (self.row.round() as isize, self.col.round() as isize);
        let mut out = Vec::new();
        for r in (r0 - m).max(0)..=(r0 + m).min(h as isize - 1) {
            for c in (c0 - m).max(0)..=(c0 + m).min(w as isize - 1) {
                if self.contains(r as usize, c as usize) {
                    out.push((r as usize, c as usize));
                }
            }
        }
        out
    }
}

/// A generated scene; `gt_points` holds every instance centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub gt: InstanceMap,
    pub gt_points: PointSet,
    pub weak_points: PointSet,
    /// Instance id of each weak point, in `weak_points` order.
    pub weak_instances: Vec<u32>,
    pub p: ProbMap,
    pub d_pred: DensityMap,
    pub z: FeatureMap,
    /// Instances erased from the probability map.
    pub dropped: Vec<u32>,
}

fn place(spec: &SceneSpec, count: usize, rng: &mut ChaCha8Rng, placed: &mut Vec<Ellipse>) -> Result<()> {
    let (h, w) = spec.shape;
    let (rmin, rmax) = spec.radius_range;
    let target = placed.len() + count;
    let mut tries = 0;
    while placed.len() < target {
        if tries >= PLACEMENT_TRIES * count.max(1) {
            return Err(Error::Placement { placed: placed.len(), requested: target });
        }
        tries += 1;
        let a = rng.random_range(rmin..=rmax);
        let b = rng.random_range(rmin..=rmax);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let m = a.max(b) + 1.0;
        let row = rng.random_range(m..h as f64 - m).round();
        let col = rng.random_range(m..w as f64 - m).round();
        let e = Ellipse { row, col, a, b, theta };
        let fits = placed.iter().all(|o| {
            let d = ((o.row - e.row).powi(2) + (o.col - e.col).powi(2)).sqrt();
            d >= 2.0 * spec.min_distance as f64 && d >= o.reach() + e.reach() + OBJECT_GAP
        });
        if fits {
            placed.push(e);
        }
    }
    Ok(())
}

fn centroid(pixels: &[(usize, usize)]) -> (usize, usize) {
    let n = pixels.len() as f64;
    let mr = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mc = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let target = (mr.round() as usize, mc.round() as usize);
    if pixels.contains(&target) {
        return target;
    }
    *pixels
        .iter()
        .min_by(|x, y| {
            let dx = (x.0 as f64 - mr).powi(2) + (x.1 as f64 - mc).powi(2);
            let dy = (y.0 as f64 - mr).powi(2) + (y.1 as f64 - mc).powi(2);
            dx.total_cmp(&dy)
        })
        .expect("instances are non-empty")
}

/// Moves `origin` by `jitter` pixels in a random direction, staying inside the instance.
fn jitter_point(
    origin: (usize, usize),
    jitter: f64,
    id: u32,
    grid: &[u32],
    (h, w): (usize, usize),
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    if jitter == 0.0 {
        return origin;
    }
    let inside = |r: f64, c: f64| {
        let (r, c) = (r.round(), c.round());
        (r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64 && grid[r as usize * w + c as usize] == id)
            .then_some((r as usize, c as usize))
    };
    for _ in 0..64 {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        if let Some(p) = inside(origin.0 as f64 + jitter * angle.sin(), origin.1 as f64 + jitter * angle.cos()) {
            return p;
        }
    }
    // the instance is too small for the full displacement; take any pixel within reach
    let reach = jitter.ceil() as isize;
    let mut pool = Vec::new();
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            if ((dr * dr + dc * dc) as f64).sqrt() <= jitter {
                if let Some(p) = inside(origin.0 as f64 + dr as f64, origin.1 as f64 + dc as f64) {
                    pool.push(p);
                }
            }
        }
    }
    pool[rng.random_range(0..pool.len())]
}

fn unit_vector(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..c).map(|_| n.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Independent random stream per scene component, so changing one knob
/// (say the point jitter) leaves every other component untouched.
fn stream(seed: u64, component: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component);
    rng
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = spec.shape;
    let mut rng = stream(spec.seed, 0);

    let mut objects = Vec::new();
    place(spec, spec.n_instances, &mut rng, &mut objects)?;
    place(spec, spec.fp_blobs, &mut rng, &mut objects)?;
    let (instances, blobs) = objects.split_at(spec.n_instances);

    let mut grid = vec![0u32; h * w];
    let mut centroids = Vec::with_capacity(instances.len());
    for (k, e) in instances.iter().enumerate() {
        let px = e.pixels(spec.shape);
        for &(r, c) in &px {
            grid[r * w + c] = k as u32 + 1;
        }
        centroids.push(centroid(&px));
    }
    let gt = InstanceMap::new(Grid::new(h, w, grid.clone())?)?;
    let gt_points = PointSet::new(centroids.iter().map(|&(r, c)| Point::ground_truth(r, c)).collect())?;

    let mut rng = stream(spec.seed, 1);
    let mut weak_instances: Vec<u32> = index::sample(&mut rng, spec.n_instances, spec.weak_point_count())
        .into_iter()
        .map(|k| k as u32 + 1)
        .collect();
    weak_instances.sort_unstable();
    let weak = weak_instances
        .iter()
        .map(|&id| {
            let (r, c) = jitter_point(centroids[id as usize - 1], spec.point_jitter, id, &grid, spec.shape, &mut rng);
            Point::ground_truth(r, c)
        })
        .collect();
    let weak_points = PointSet::new(weak)?;

    let mut rng = stream(spec.seed, 2);
    let n_drop = (spec.fn_drop * spec.n_instances as f64).round() as usize;
    let mut dropped: Vec<u32> = index::sample(&mut rng, spec.n_instances, n_drop).into_iter().map(|k| k as u32 + 1).collect();
    dropped.sort_unstable();
    let mut fg = grid.iter().map(|&id| id > 0 && dropped.binary_search(&id).is_err()).collect::<Vec<_>>();
    for e in blobs {
        for (r, c) in e.pixels(spec.shape) {
            fg[r * w + c] = true;
        }
    }
    let logit_noise = Normal::new(0.0, spec.prob_noise.max(f64::MIN_POSITIVE)).expect("finite std-dev");
    let p_data: Vec<f32> = fg
        .iter()
        .map(|&f| {
            let base = if f { BASE_LOGIT } else { -BASE_LOGIT };
            let noise = if spec.prob_noise > 0.0 { logit_noise.sample(&mut rng) } else { 0.0 };
            (1.0 / (1.0 + (-(base + noise)).exp())) as f32
        })
        .collect();
    let p = ProbMap::new(Grid::new(h, w, p_data)?)?;

    let mut rng = stream(spec.seed, 3);
    let amplitudes: Vec<f64> = if spec.density_noise > 0.0 {
        let n = Normal::new(1.0, spec.density_noise).expect("finite std-dev");
        (0..spec.n_instances).map(|_| n.sample(&mut rng).max(0.0)).collect()
    } else {
        vec![1.0; spec.n_instances]
    };
    let d_pred = build_weighted_density_map(&gt_points, &amplitudes, spec.shape, &GaussianKernel::new(spec.sigma)?)?;

    let mut rng = stream(spec.seed, 4);
    let c = spec.feature_channels;
    let m1 = unit_vector(&mut rng, c);
    let m0 = [unit_vector(&mut rng, c), unit_vector(&mut rng, c)];
    let feature_noise = Normal::new(0.0, spec.feature_noise.max(f64::MIN_POSITIVE)).expect("finite std-dev");
    let mut z = vec![0f32; c * h * w];
    for (i, &id) in grid.iter().enumerate() {
        let mean = if id > 0 { &m1 } else { &m0[(i / w / BACKGROUND_BAND) % 2] };
        for ch in 0..c {
            let noise = if spec.feature_noise > 0.0 { feature_noise.sample(&mut rng) } else { 0.0 };
            z[ch * h * w + i] = (mean[ch] + noise) as f32;
        }
    }
    let z = FeatureMap::new(c, h, w, z)?;

    Ok(Scene { spec: spec.clone(), gt, gt_points, weak_points, weak_instances, p, d_pred, z, dropped })
}

/// Generates scenes in parallel; each depends only on its own spec.
pub fn generate_scenes(specs: &[SceneSpec]) -> Result<Vec<Scene>> {
    specs.par_iter().map(generate_scene).collect()
}

#[derive(Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema_version: u32,
    pub spec: SceneSpec,
    pub instances: u32,
    pub weak_points: usize,
    pub dropped: Vec<u32>,
    pub files: Vec<String>,
}

pub const SCENE_FILES: [&str; 6] = ["gt_instances.npy", "gt_points.npy", "points.npy", "prob.npy", "density.npy", "features.npy"];

impl Scene {
    /// Writes every tensor plus `manifest.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        self.gt.store(dir.join(SCENE_FILES[0]))?;
        self.gt_points.store(dir.join(SCENE_FILES[1]))?;
        self.weak_points.store(dir.join(SCENE_FILES[2]))?;
        self.p.store(dir.join(SCENE_FILES[3]))?;
        self.d_pred.store(dir.join(SCENE_FILES[4]))?;
        self.z.store(dir.join(SCENE_FILES[5]))?;
        let manifest = SceneManifest {
            schema_version: 1,
            spec: self.spec.clone(),
            instances: self.gt.count(),
            weak_points: self.weak_points.len(),
            dropped: self.dropped.clone(),
            files: SCENE_FILES.iter().map(|s| s.to_string()).collect(),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })
    }
}
