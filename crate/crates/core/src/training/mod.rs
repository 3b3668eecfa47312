//! Ground truth, loss and the training loop.

mod augment;
mod gt;
mod loss;
mod trainer;

pub use augment::{augment_8fold, transform_tile, Augmentation};
pub use gt::{derive_edges, downsample_mask, MultiscaleGt};
pub use loss::{balanced_bce, balanced_bce_logits, bundle_loss, side_levels, total_loss, LossBreakdown, LossTerms, LossWeights, PROB_CLAMP};
pub(crate) use trainer::model_dem;
pub use trainer::{
    batch_dem, batch_input, evaluate, evaluate_with, fit_normalization, predict_tiles, probabilities, train, EpochRecord, LossRecord,
    TrainConfig, EVAL_BATCH,
};
