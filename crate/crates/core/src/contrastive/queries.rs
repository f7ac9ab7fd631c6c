use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::unit_feature;
use crate::error::{Error, Result};
use crate::types::{check_same_shape, FeatureMap, LabelMap, ProbMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryParams {
    pub delta_e: f64,
    pub delta_h: f64,
    pub easy_budget: usize,
    pub hard_budget: usize,
}

impl Default for QueryParams {
    fn default() -> Self {
        QueryParams { delta_e: 0.95, delta_h: 0.80, easy_budget: 512, hard_budget: 512 }
    }
}

/// Easy and hard pixel queries of one class, each an L2-normalized feature.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub class_id: u8,
    pub easy: Vec<Vec<f64>>,
    pub hard: Vec<Vec<f64>>,
    /// Flat pixel offsets the queries were drawn from.
    pub easy_pixels: Vec<usize>,
    pub hard_pixels: Vec<usize>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.easy.len() + self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.easy.iter().chain(self.hard.iter())
    }
}

/// Probability of `class_id` at a pixel, from the foreground probability.
pub fn class_probability(p_foreground: f32, class_id: u8) -> f64 {
    if class_id == 1 {
        p_foreground as f64
    } else {
        1.0 - p_foreground as f64
    }
}

/// Draws up to the budgeted number of easy (`prob > delta_e`) and hard
/// (`prob < delta_h`) queries among pixels labelled `class_id`, uniformly
/// without replacement. Ignored pixels and zero features are never drawn.
pub fn sample_queries(
    z: &FeatureMap,
    labels: &LabelMap,
    p: &ProbMap,
    class_id: u8,
    params: &QueryParams,
    seed: u64,
) -> Result<QuerySet> {
    if class_id > 1 {
        return Err(Error::param(format!("class_id must be 0 or 1, got {class_id}")));
    }
    if !(params.delta_h < params.delta_e) {
        return Err(Error::param("delta_h must be below delta_e"));
    }
    check_same_shape("sample_queries features/labels", z.shape(), labels.shape())?;
    check_same_shape("sample_queries features/probabilities", z.shape(), p.shape())?;

    let mut easy_pool = Vec::new();
    let mut hard_pool = Vec::new();
    for (i, (&y, &pv)) in labels.grid().data().iter().zip(p.grid().data()).enumerate() {
        if y != class_id {
            continue;
        }
        let prob = class_probability(pv, class_id);
        if prob > params.delta_e {
            easy_pool.push(i);
        } else if prob < params.delta_h {
            hard_pool.push(i);
        }
    }
    let valid = |pool: Vec<usize>| -> Vec<(usize, Vec<f64>)> {
        pool.into_iter().filter_map(|i| unit_feature(z, i).map(|v| (i, v))).collect()
    };
    let easy_pool = valid(easy_pool);
    let hard_pool = valid(hard_pool);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |pool: Vec<(usize, Vec<f64>)>, budget: usize| {
        let mut picks = index::sample(&mut rng, pool.len(), budget.min(pool.len())).into_vec();
        picks.sort_unstable();
        let (pixels, vecs): (Vec<usize>, Vec<Vec<f64>>) = picks.into_iter().map(|k| pool[k].clone()).unzip();
        (pixels, vecs)
    };
    let (easy_pixels, easy) = draw(easy_pool, params.easy_budget);
    let (hard_pixels, hard) = draw(hard_pool, params.hard_budget);
    Ok(QuerySet { class_id, easy, hard, easy_pixels, hard_pixels })
}
