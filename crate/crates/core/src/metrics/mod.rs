//! Masked training losses and instance-level evaluation metrics.

pub mod instance;
pub mod losses;

pub use instance::{aji, aji_match, dice, pq, MatchResult, MatchedPair};
pub use losses::{cross_entropy_masked, l2_masked, total_objective, ObjectiveWeights, PROB_CLAMP};
