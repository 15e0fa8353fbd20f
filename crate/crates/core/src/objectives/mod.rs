//! Training losses and evaluation metrics.

pub mod losses;
pub mod metrics;

pub use losses::{
    bce_loss, dice_loss, seg_loss, sigmoid, total_loss, triplet_loss, LossConfig, SegLoss,
};
pub use metrics::{
    metrics, threshold_logits, Confusion, ImageScores, MetricReport, Scores, EMPTY_MASK_CONVENTION,
};
