//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { k: 2, max_iter: 50, tol: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[pick].clone();
        for (slot, x) in d2.iter_mut().zip(data) {
            *slot = slot.min(sq_dist(x, &c));
        }
        centroids.push(c);
    }
    centroids
}

pub fn kmeans(data: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansFit> {
    if config.k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    if data.len() < config.k {
        return Err(Error::param(format!("k-means with k={} needs at least {} points, got {}", config.k, config.k, data.len())));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim) {
        return Err(Error::shape("k-means points must share one dimension"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = seed_plus_plus(data, config.k, &mut rng);
    let mut assignments = vec![0usize; data.len()];
    let mut objective_trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..config.max_iter.max(1) {
        iterations += 1;
        let mut sse = 0.0;
        for (a, x) in assignments.iter_mut().zip(data) {
            let (j, d) = nearest(x, &centroids);
            *a = j;
            sse += d;
        }
        objective_trace.push(sse);

        let mut sums = vec![vec![0f64; dim]; config.k];
        let mut counts = vec![0usize; config.k];
        for (&a, x) in assignments.iter().zip(data) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut shift = 0f64;
        for j in 0..config.k {
            // an emptied cluster keeps its previous centroid
            if counts[j] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift < config.tol {
            break;
        }
    }

    Ok(KMeansFit { centroids, assignments, objective_trace, iterations })
}
