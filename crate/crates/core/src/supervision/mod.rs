//! Ground truth from known homographies and the training losses.

pub mod flow;
pub mod gt;
pub mod losses;

pub use flow::Flow;
pub use gt::{make_gt, pad_gt, GroundTruth};
pub use losses::{focal_loss, laplace_nll, rle_loss, total_loss, LossConfig};
