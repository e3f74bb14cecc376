//! Importance-driven routing: ratio schedules, score prediction, mask
//! sampling and binarisation, MLP paths, and split/aggregate.

mod mask;
mod mpa;
mod path;
mod predictor;
mod ratio;

pub use mask::{
    binarize_mask_infer, logistic_noise, ranking, sample_mask_train, target_count, ImportanceMask,
    MaskGrad, StageMask,
};
pub use mpa::{dense_oracle, mpa_apply, PathCounters};
pub use path::{PathKind, PathSpec};
pub use predictor::{Predictor, BIAS_LEVELS};
pub use ratio::{ratio_decoder, RatioSchedule};
