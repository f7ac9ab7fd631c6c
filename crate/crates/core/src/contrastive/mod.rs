//! Class-focused pixel-to-prototype contrast.
//!
//! Every feature is L2-normalized before it is averaged, clustered or dotted
//! with a prototype, so similarities stay in [-1, 1] and the temperature has a
//! fixed meaning.

pub mod kmeans;
pub mod loss;
pub mod prototypes;
pub mod queries;

pub use kmeans::{kmeans, KMeansConfig, KMeansFit};
pub use loss::contrastive_loss;
pub use prototypes::{
    background_prototypes, foreground_prototypes, BackgroundPrototypes, BankHandle, ClassPrototypes,
    ForegroundPrototypes, PrototypeBank, Slot, SourceView, TargetView, UNIT_NORM_TOLERANCE,
};
pub use queries::{class_probability, sample_queries, QueryParams, QuerySet};

use crate::types::FeatureMap;

/// Returns `v / |v|`, or `None` for a zero or non-finite vector.
pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        Some(v.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized feature at a flat pixel offset; zero features carry no direction and are skipped.
pub(crate) fn unit_feature(z: &FeatureMap, pixel: usize) -> Option<Vec<f64>> {
    let v: Vec<f64> = z.vector_at(pixel).into_iter().map(f64::from).collect();
    normalize(&v)
}
