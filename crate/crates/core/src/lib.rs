//! Non-neural engine for point-supervised domain-adaptive instance segmentation.
//!
//! The crate curates pseudo-labels from a segmentation probability map and a
//! predicted center density map, builds class prototypes for pixel-to-prototype
//! contrast, evaluates the masked training losses, and scores instance
//! segmentations. Every input and output is a plain tensor file, so any
//! training loop can drive it.

// `!(x > 0.0)` is how parameter checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod contrastive;
pub mod density;
pub mod error;
pub mod ipl;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tensor_io;
pub mod types;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use tensor_io::{load_tensor, store_tensor, Tensor, TensorFile, TensorKind};
pub use types::{
    Connectivity, DensityMap, FeatureMap, Grid, InstanceMap, LabelMap, Point, PointSet, ProbMap,
    Provenance, BACKGROUND, FOREGROUND, IGNORE,
};
