//! Center-point density maps: construction, counting, peak extraction,
//! test-time ensembling and the detection pseudo-label schedule.

pub mod dihedral;
pub mod gaussian;
pub mod nms;
pub mod rounds;

pub use dihedral::{tta_ensemble, Dihedral};
pub use gaussian::{
    background_mask, build_density_map, build_density_map_with, build_weighted_density_map, estimate_count, single_point_peak,
    GaussianKernel,
};
pub use nms::nms_peaks;
pub use rounds::{next_detection_round, CountBasis, DetectionParams, DetectionRound, DetectionRoundState};
