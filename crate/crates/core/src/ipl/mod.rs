//! Instance-aware pseudo-label selection.
//!
//! Pseudo-labels are chosen per connected region rather than per pixel: a
//! region of the binarized prediction is kept whole as soon as it contains one
//! confident center, however uncertain its other pixels are.

pub mod components;
pub mod rounds;
pub mod select;

pub use components::{connected_components, relabel_regions, DisjointSet};
pub use rounds::{segmentation_round, SegParams, SegRound, SegRoundState};
pub use select::{
    binarize, confident_background, filter_false_positives, fuse_pseudolabel, ipl_select,
    select_confident_centers, Fusion,
};
