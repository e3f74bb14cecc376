//! Loss terms, synthetic data, frozen toy task models and the two-stage
//! optimisation protocol.

mod data;
mod losses;
mod objective;
mod run;
mod task_model;

pub use data::{
    grating, read_dataset, regions, sample_tensor, texture, texture_set, write_dataset, DataSource, Entry, Sample,
    TextureKind, CLS_CLASSES, LABELS_FILE, SEG_CLASSES,
};
pub use losses::{
    discriminator_loss, distortion_d, gan_losses, generator_loss, ratio_loss, Discriminator, LossWeights,
    PerceptualProxy, D_CLAMP, RATE_WEIGHTS,
};
pub use objective::{Estimators, Objective, Stage1Output, Stage2Output, Terms};
pub use run::{
    execute, init_stage1, prepare_stage2, psnr_from_mse255, train_stage1, train_stage2, MetricsRow, RunSummary,
    Stage2Report, TrainRun,
};
pub use task_model::{accuracy, channel_stats, mean_iou, TaskModel};
