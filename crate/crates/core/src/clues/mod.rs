//! Spatial clues: prototype banks, optimal-transport assignment and the
//! clue-based contrastive loss.

mod bank;
mod contrastive;
mod sinkhorn;

pub use bank::{farthest_points, momentum_step, Polarity, PrototypeBank};
pub use contrastive::{cbl_loss, similarity, CblOptions, CblOutput};
pub use sinkhorn::{l2_normalize_rows, sinkhorn_assign, sinkhorn_from_scores, AssignmentMatrix, SinkhornParams};
